//! Supervised training on clean/dusty pairs and learned inference.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::graph::Graph;
use super::model::{forward_graph, forward_params, init_params, BoundParams, NetConfig, IMAGE_CHANNELS};
use super::optim::{AdamW, AdamWConfig};
use super::tensor::Tensor;
use super::weights::{save_weights, ModelWeights};
use crate::degrade::{resolve_manifest_path, ManifestRecord};
use crate::error::{Error, Result};
use crate::raster::{augment, crop_patch, load_image, Image, PatchRegion};
use crate::rng::{mix, SplitMix64};

const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    /// Side of the square training crops.
    pub patch: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch: 64,
            batch: 8,
            lr: 1e-4,
            epochs: 30,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-size recipe: 512 px crops, batch 8, lr 1e-4, 180 epochs.
    pub fn full_scale() -> Self {
        Self {
            patch: 512,
            epochs: 180,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.patch.is_multiple_of(4) {
            return Err(Error::invalid("patch", format!("{} must be a positive multiple of 4", self.patch)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be > 0", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub clean: Image,
    pub dusty: Image,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub train: TrainConfig,
    pub net: NetConfig,
    pub loss: &'static str,
    pub pairs: usize,
    pub steps: usize,
    /// Mean L1 loss over the samples of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        self.epoch_losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().expect("at least one epoch")
    }
}

fn sample_crop(pair: &TrainingPair, patch: usize, rng: &mut SplitMix64) -> Result<(Image, Image)> {
    let (w, h) = (pair.clean.width(), pair.clean.height());
    let x0 = rng.below((w - patch + 1) as u64) as usize;
    let y0 = rng.below((h - patch + 1) as u64) as usize;
    let rot = rng.below(4) as u8;
    let flip = rng.below(2) == 1;
    let region = PatchRegion::new(x0, y0, patch, patch);
    let clean = augment(&crop_patch(&pair.clean, region)?, rot, flip);
    let dusty = augment(&crop_patch(&pair.dusty, region)?, rot, flip);
    Ok((clean, dusty))
}

/// Train from in-memory pairs. Deterministic in `cfg.seed`.
pub fn train_pairs(cfg: &TrainConfig, net: &NetConfig, pairs: &[TrainingPair]) -> Result<(ModelWeights, TrainReport)> {
    cfg.validate()?;
    net.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("manifest", "no training pairs"));
    }
    for (i, p) in pairs.iter().enumerate() {
        if !p.clean.same_dims(&p.dusty) {
            return Err(Error::DimensionMismatch(format!("pair {i}: clean and dusty differ")));
        }
        if p.clean.width() < cfg.patch || p.clean.height() < cfg.patch {
            return Err(Error::invalid(
                "patch",
                format!(
                    "{} px exceeds pair {i} of {}x{}",
                    cfg.patch,
                    p.clean.width(),
                    p.clean.height()
                ),
            ));
        }
    }

    let mut params = init_params(net, mix(cfg.seed, INIT_STREAM), net.use_global_residual);
    let mut opt = AdamW::new(&params, cfg.lr, cfg.adamw);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = SplitMix64::new(mix(cfg.seed, epoch as u64 + 1));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        rng.shuffle(&mut order);
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut cleans = Vec::with_capacity(chunk.len());
            let mut dusties = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (c, d) = sample_crop(&pairs[i], cfg.patch, &mut rng)?;
                cleans.push(c);
                dusties.push(d);
            }
            let x = Tensor::from_images(&dusties.iter().collect::<Vec<_>>(), IMAGE_CHANNELS)?;
            let y = Tensor::from_images(&cleans.iter().collect::<Vec<_>>(), IMAGE_CHANNELS)?;

            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, net, &params, true)?;
            let xv = g.leaf(x, false);
            let yv = g.leaf(y, false);
            let trace = forward_graph(&mut g, net, &bound, xv)?;
            let loss = g.l1_loss(trace.output, yv)?;
            g.backward(loss)?;
            weighted += g.value(loss).data[0] * chunk.len() as f64;
            let grads: Vec<Option<&[f64]>> = bound.vars.iter().map(|v| g.grad(*v)).collect();
            opt.step(&mut params, &grads);
        }
        let mean = weighted / pairs.len() as f64;
        log::info!("epoch {}/{}: mean L1 {mean:.6}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
    }

    let weights = ModelWeights::from_params(net, &params)?;
    let report = TrainReport {
        train: *cfg,
        net: *net,
        loss: "L1",
        pairs: pairs.len(),
        steps: opt.steps() as usize,
        epoch_losses,
    };
    Ok((weights, report))
}

/// Load the pairs listed in a manifest. Relative paths resolve against
/// `manifest_dir` when they do not exist as written.
pub fn load_pairs(records: &[ManifestRecord], manifest_dir: &Path) -> Result<Vec<TrainingPair>> {
    records
        .iter()
        .map(|r| {
            Ok(TrainingPair {
                clean: load_image(resolve_manifest_path(manifest_dir, &r.clean))?,
                dusty: load_image(resolve_manifest_path(manifest_dir, &r.dusty))?,
            })
        })
        .collect()
}

/// Path of the JSON report written next to a weights file.
pub fn report_path(weights_path: &Path) -> PathBuf {
    weights_path.with_extension("report.json")
}

/// Train on every pair of a manifest, writing the weights to `out` and the
/// report beside it.
pub fn train_manifest(
    cfg: &TrainConfig,
    net: &NetConfig,
    records: &[ManifestRecord],
    manifest_dir: &Path,
    out: &Path,
) -> Result<TrainReport> {
    if records.is_empty() {
        return Err(Error::invalid("manifest", "no records"));
    }
    let pairs = load_pairs(records, manifest_dir)?;
    let (weights, report) = train_pairs(cfg, net, &pairs)?;
    save_weights(&weights, out)?;
    let rp = report_path(out);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&rp, json).map_err(|e| Error::io(&rp, e))?;
    Ok(report)
}

/// Edge-replicate `img` up to multiples of `m` in both axes.
fn pad_to_multiple(img: &Image, m: usize) -> Image {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    if (pw, ph) == (w, h) {
        return img.clone();
    }
    let mut data = Vec::with_capacity(pw * ph * c);
    for y in 0..ph {
        for x in 0..pw {
            data.extend_from_slice(img.pixel(x.min(w - 1), y.min(h - 1)));
        }
    }
    Image::from_vec(pw, ph, c, data).expect("padding preserves sample range")
}

/// Run the trained network on a whole image of any size.
pub fn restore_image(weights: &ModelWeights, img: &Image) -> Result<Image> {
    let cfg = weights.net_config()?;
    let params = weights.to_params(&cfg)?;
    let padded = pad_to_multiple(img, cfg.spatial_multiple());
    let x = Tensor::from_images(&[&padded], IMAGE_CHANNELS)?;
    let y = forward_params(&cfg, &params, &x)?;
    let out = y.to_image(0, img.channels())?;
    crop_patch(&out, PatchRegion::new(0, 0, img.width(), img.height()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::test_util::random_image;

    fn pairs(n: usize, size: usize) -> Vec<TrainingPair> {
        (0..n)
            .map(|i| {
                let clean = random_image(size, size, 3, i as u64);
                let dusty = Image::from_vec(
                    size,
                    size,
                    3,
                    clean.data().iter().map(|v| 0.5 * v + 0.4).collect(),
                )
                .unwrap();
                TrainingPair { clean, dusty }
            })
            .collect()
    }

    #[test]
    fn full_scale_recipe() {
        let c = TrainConfig::full_scale();
        assert_eq!((c.patch, c.batch, c.lr, c.epochs), (512, 8, 0.0001, 180));
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { patch: 30, ..Default::default() },
            TrainConfig { batch: 0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn rejects_empty_and_oversized_patches() {
        let net = NetConfig::with_width(2);
        let cfg = TrainConfig { patch: 16, epochs: 1, ..Default::default() };
        assert!(train_pairs(&cfg, &net, &[]).is_err());
        let err = train_pairs(&TrainConfig { patch: 32, ..cfg }, &net, &pairs(2, 20)).unwrap_err();
        assert!(matches!(err, Error::Validation { param: "patch", .. }));
    }

    #[test]
    fn seeded_runs_are_bit_identical_and_learn() {
        let net = NetConfig {
            growth: 4,
            ddsc_layers_per_module: 2,
            ..NetConfig::with_width(4)
        };
        let cfg = TrainConfig {
            patch: 16,
            batch: 3,
            lr: 3e-3,
            epochs: 6,
            seed: 5,
            ..Default::default()
        };
        let data = pairs(6, 24);
        let (w1, r1) = train_pairs(&cfg, &net, &data).unwrap();
        let (w2, r2) = train_pairs(&cfg, &net, &data).unwrap();
        assert_eq!(w1.to_bytes(), w2.to_bytes());
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        assert_eq!(r1.steps, 12);
        assert!(r1.final_loss() < r1.first_loss(), "{:?}", r1.epoch_losses);
    }

    #[test]
    fn thread_count_does_not_change_training() {
        let net = NetConfig::with_width(2);
        let cfg = TrainConfig { patch: 16, batch: 2, lr: 1e-3, epochs: 2, seed: 3, ..Default::default() };
        let data = pairs(4, 20);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train_pairs(&cfg, &net, &data).unwrap().0.to_bytes())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn restore_handles_sizes_not_divisible_by_four() {
        let net = NetConfig::with_width(2);
        let w = ModelWeights::from_params(&net, &init_params(&net, 1, true)).unwrap();
        let img = random_image(13, 7, 3, 4);
        // Identity at init: zero final layer plus global residual.
        assert_eq!(restore_image(&w, &img).unwrap(), img);
        let gray = random_image(9, 6, 1, 5);
        let back = restore_image(&w, &gray).unwrap();
        for (a, b) in back.data().iter().zip(gray.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
