//! Desk-scale encoder-decoder for learned dust removal, with the autodiff
//! engine and optimizer needed to train it.

mod graph;
mod model;
mod optim;
mod tensor;
mod train;
mod weights;

pub use graph::{Graph, Var};
pub use model::{forward_graph, forward_params, init_params, BoundParams, ForwardTrace, NetConfig, IMAGE_CHANNELS};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::Tensor;
pub use train::{restore_image, train_manifest, train_pairs, TrainConfig, TrainReport, TrainingPair};
pub use weights::{load_weights, save_weights, ModelWeights, NamedTensor, CONFIG_TENSOR};

/// Run a saved model on a batch. The network config is read from the
/// weights and must agree with `cfg`.
pub fn forward(weights: &ModelWeights, cfg: &NetConfig, x: &Tensor) -> crate::Result<Tensor> {
    let params = weights.to_params(cfg)?;
    forward_params(cfg, &params, x)
}
