//! The encoder-decoder restoration network.
//!
//! ```text
//! input (3ch)
//!   -> stem 3x3 conv (base) -> two stride-2 3x3 convs (2*base, 4*base)
//!   -> [DDSC module -> FA block] x ddsc_modules      at 4*base channels
//!   -> two (nearest x2 upsample -> 3x3 conv halving channels)
//!   -> final 3x3 conv (3ch) [-> clamp(input + prediction)]
//! ```
//!
//! A DDSC module is a chain of depthwise-separable 3x3 convolutions in which
//! layer `i` sees the concatenation of the module input and the outputs of
//! layers `0..i`, followed by a 1x1 transition back to the module width.
//! An FA block gates features per channel and then per pixel.

use std::collections::HashMap;

use serde::Serialize;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{mix, SplitMix64};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NetConfig {
    pub base_width: usize,
    pub ddsc_modules: usize,
    pub ddsc_layers_per_module: usize,
    pub growth: usize,
    pub downsamples: usize,
    pub use_global_residual: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            ddsc_modules: 3,
            ddsc_layers_per_module: 4,
            growth: 16,
            downsamples: 2,
            use_global_residual: true,
        }
    }
}

impl NetConfig {
    pub fn with_width(base_width: usize) -> Self {
        Self {
            base_width,
            ..Self::default()
        }
    }

    /// Small network used for finite-difference gradient checks.
    pub fn miniature() -> Self {
        Self {
            base_width: 4,
            ddsc_modules: 3,
            ddsc_layers_per_module: 2,
            growth: 4,
            downsamples: 2,
            use_global_residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base_width", self.base_width),
            ("ddsc_modules", self.ddsc_modules),
            ("ddsc_layers_per_module", self.ddsc_layers_per_module),
            ("growth", self.growth),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be >= 1"));
            }
        }
        if self.downsamples != 2 {
            return Err(Error::invalid("downsamples", "the architecture downsamples exactly twice"));
        }
        Ok(())
    }

    /// Channel width of the DDSC stage.
    pub fn feature_width(&self) -> usize {
        self.base_width << self.downsamples
    }

    /// Hidden width of the attention bottlenecks.
    pub fn attention_width(&self) -> usize {
        (self.feature_width() / 8).max(1)
    }

    /// Input channel count of dense layer `layer` inside a DDSC module.
    pub fn dense_input_channels(&self, layer: usize) -> usize {
        self.feature_width() + layer * self.growth
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.downsamples
    }

    /// Parameter names and NCHW shapes, in canonical order. Biases have
    /// shape `[c, 1, 1, 1]`.
    pub fn param_specs(&self) -> Vec<(String, [usize; 4])> {
        let mut specs = Vec::new();
        let mut conv = |name: String, cout: usize, cin_g: usize, k: usize| {
            specs.push((format!("{name}.weight"), [cout, cin_g, k, k]));
            specs.push((format!("{name}.bias"), [cout, 1, 1, 1]));
        };
        let b = self.base_width;
        conv("stem".into(), b, IMAGE_CHANNELS, 3);
        for i in 0..self.downsamples {
            conv(format!("down{i}"), b << (i + 1), b << i, 3);
        }
        let fw = self.feature_width();
        let aw = self.attention_width();
        for m in 0..self.ddsc_modules {
            for l in 0..self.ddsc_layers_per_module {
                let cin = self.dense_input_channels(l);
                conv(format!("ddsc{m}.layer{l}.dw"), cin, 1, 3);
                conv(format!("ddsc{m}.layer{l}.pw"), self.growth, cin, 1);
            }
            conv(
                format!("ddsc{m}.transition"),
                fw,
                self.dense_input_channels(self.ddsc_layers_per_module),
                1,
            );
            conv(format!("fa{m}.ca1"), aw, fw, 1);
            conv(format!("fa{m}.ca2"), fw, aw, 1);
            conv(format!("fa{m}.pa1"), aw, fw, 1);
            conv(format!("fa{m}.pa2"), 1, aw, 1);
        }
        for i in 0..self.downsamples {
            conv(format!("up{i}"), fw >> (i + 1), fw >> i, 3);
        }
        conv("final".into(), IMAGE_CHANNELS, b, 3);
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// He-normal weights and zero biases. With `zero_final`, the last
/// convolution starts at zero so a residual network begins as the identity.
pub fn init_params(cfg: &NetConfig, seed: u64, zero_final: bool) -> Vec<Tensor> {
    cfg.param_specs()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let mut t = Tensor::zeros(shape);
            let is_final = name.starts_with("final.");
            if name.ends_with(".weight") && !(zero_final && is_final) {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let std = (2.0 / fan_in).sqrt();
                let mut r = SplitMix64::new(mix(seed, i as u64));
                t.data.iter_mut().for_each(|v| *v = std * r.next_gaussian());
            }
            t
        })
        .collect()
}

/// Parameters bound as leaves of a graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, cfg: &NetConfig, params: &[Tensor], requires_grad: bool) -> Result<Self> {
        let specs = cfg.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors for a network with {}",
                params.len(),
                specs.len()
            )));
        }
        let mut vars = Vec::with_capacity(params.len());
        let mut index = HashMap::new();
        for (i, ((name, shape), t)) in specs.into_iter().zip(params).enumerate() {
            if t.shape != shape {
                return Err(Error::Shape(format!("{name}: {:?} expected {shape:?}", t.shape)));
            }
            vars.push(g.leaf(t.clone(), requires_grad));
            index.insert(name, i);
        }
        Ok(Self { vars, index })
    }

    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn conv(&self, g: &mut Graph, name: &str, x: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let w = self.get(&format!("{name}.weight"));
        let b = self.get(&format!("{name}.bias"));
        g.conv2d(x, w, b, stride, pad, groups)
    }
}

/// Output of a forward pass plus the intermediate nodes tests inspect.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: Var,
    pub channel_gates: Vec<Var>,
    pub pixel_gates: Vec<Var>,
    /// Input channel count seen by each dense layer, module-major.
    pub dense_inputs: Vec<usize>,
    /// Channel count after stem, each downsample, the DDSC stage and each
    /// upsample stage, then the output.
    pub channel_path: Vec<usize>,
}

/// Record the network on `g` for input node `x`.
pub fn forward_graph(g: &mut Graph, cfg: &NetConfig, p: &BoundParams, x: Var) -> Result<ForwardTrace> {
    cfg.validate()?;
    let [_, c, h, w] = g.value(x).shape;
    if c != IMAGE_CHANNELS {
        return Err(Error::Shape(format!("input has {c} channels, expected {IMAGE_CHANNELS}")));
    }
    let m = cfg.spatial_multiple();
    if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("input {h}x{w} not divisible by {m}")));
    }
    let mut trace = ForwardTrace {
        output: x,
        channel_gates: Vec::new(),
        pixel_gates: Vec::new(),
        dense_inputs: Vec::new(),
        channel_path: Vec::new(),
    };
    let channels = |g: &Graph, v: Var| g.value(v).shape[1];

    let s = p.conv(g, "stem", x, 1, 1, 1)?;
    let mut hcur = g.relu(s);
    trace.channel_path.push(channels(g, hcur));
    for i in 0..cfg.downsamples {
        let d = p.conv(g, &format!("down{i}"), hcur, 2, 1, 1)?;
        hcur = g.relu(d);
        trace.channel_path.push(channels(g, hcur));
    }

    for m in 0..cfg.ddsc_modules {
        let mut feats = vec![hcur];
        for l in 0..cfg.ddsc_layers_per_module {
            let inp = if feats.len() == 1 { feats[0] } else { g.concat(&feats)? };
            let cin = channels(g, inp);
            trace.dense_inputs.push(cin);
            let dw = p.conv(g, &format!("ddsc{m}.layer{l}.dw"), inp, 1, 1, cin)?;
            let pw = p.conv(g, &format!("ddsc{m}.layer{l}.pw"), dw, 1, 0, 1)?;
            feats.push(g.relu(pw));
        }
        let cat = g.concat(&feats)?;
        hcur = p.conv(g, &format!("ddsc{m}.transition"), cat, 1, 0, 1)?;

        let pooled = g.global_avg_pool(hcur);
        let a = p.conv(g, &format!("fa{m}.ca1"), pooled, 1, 0, 1)?;
        let a = g.relu(a);
        let a = p.conv(g, &format!("fa{m}.ca2"), a, 1, 0, 1)?;
        let cgate = g.sigmoid(a);
        trace.channel_gates.push(cgate);
        hcur = g.mul(hcur, cgate)?;

        let q = p.conv(g, &format!("fa{m}.pa1"), hcur, 1, 0, 1)?;
        let q = g.relu(q);
        let q = p.conv(g, &format!("fa{m}.pa2"), q, 1, 0, 1)?;
        let pgate = g.sigmoid(q);
        trace.pixel_gates.push(pgate);
        hcur = g.mul(hcur, pgate)?;
    }
    trace.channel_path.push(channels(g, hcur));

    for i in 0..cfg.downsamples {
        let u = g.upsample2x(hcur);
        let u = p.conv(g, &format!("up{i}"), u, 1, 1, 1)?;
        hcur = g.relu(u);
        trace.channel_path.push(channels(g, hcur));
    }
    let mut out = p.conv(g, "final", hcur, 1, 1, 1)?;
    if cfg.use_global_residual {
        let sum = g.add(x, out)?;
        out = g.clamp01(sum);
    }
    trace.channel_path.push(channels(g, out));
    trace.output = out;
    Ok(trace)
}

/// Inference without gradient tracking.
pub fn forward_params(cfg: &NetConfig, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, cfg, params, false)?;
    let xv = g.leaf(x.clone(), false);
    let trace = forward_graph(&mut g, cfg, &p, xv)?;
    Ok(g.value(trace.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(shape: [usize; 4], seed: u64) -> Tensor {
        let mut r = SplitMix64::new(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.next_f64()).collect()).unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = NetConfig::with_width(4);
        let params = init_params(&cfg, 1, false);
        for shape in [[1, 3, 8, 8], [2, 3, 12, 16], [1, 3, 4, 20]] {
            let x = input(shape, 2);
            assert_eq!(forward_params(&cfg, &params, &x).unwrap().shape, shape);
        }
    }

    #[test]
    fn zero_weights_with_residual_are_identity() {
        let cfg = NetConfig::with_width(4);
        let zeros: Vec<Tensor> = cfg.param_specs().into_iter().map(|(_, s)| Tensor::zeros(s)).collect();
        let x = input([2, 3, 8, 12], 3);
        assert_eq!(forward_params(&cfg, &zeros, &x).unwrap(), x);
        // The default init zeroes only the last layer, with the same effect.
        let init = init_params(&cfg, 9, true);
        assert_eq!(forward_params(&cfg, &init, &x).unwrap(), x);
    }

    #[test]
    fn structure_gates_and_channel_path() {
        let cfg = NetConfig {
            base_width: 8,
            ddsc_modules: 3,
            ddsc_layers_per_module: 4,
            growth: 5,
            downsamples: 2,
            use_global_residual: true,
        };
        let params = init_params(&cfg, 4, false);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &cfg, &params, false).unwrap();
        let x = g.leaf(input([1, 3, 16, 16], 5), false);
        let t = forward_graph(&mut g, &cfg, &p, x).unwrap();
        assert_eq!(t.channel_path, vec![8, 16, 32, 32, 16, 8, 3]);
        let expected: Vec<usize> = (0..3).flat_map(|_| (0..4).map(|i| 32 + 5 * i)).collect();
        assert_eq!(t.dense_inputs, expected);
        assert_eq!(t.channel_gates.len(), 3);
        for gate in t.channel_gates.iter().chain(&t.pixel_gates) {
            assert!(g.value(*gate).data.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(g.value(t.pixel_gates[0]).shape, [1, 1, 4, 4]);
        assert_eq!(g.value(t.channel_gates[0]).shape, [1, 32, 1, 1]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = NetConfig::with_width(4);
        let params = init_params(&cfg, 1, true);
        assert!(forward_params(&cfg, &params, &input([1, 3, 6, 8], 1)).is_err());
        assert!(forward_params(&cfg, &params, &input([1, 1, 8, 8], 1)).is_err());
        let other = NetConfig::with_width(8);
        assert!(forward_params(&other, &params, &input([1, 3, 8, 8], 1)).is_err());
        let bad = NetConfig {
            downsamples: 3,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }
}
