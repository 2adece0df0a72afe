//! Weights file format.
//!
//! ```text
//! "MDW1"  u32 version (=1)  u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 rank, rank x u32 dims,
//!             prod(dims) x f32
//! ```
//!
//! Everything is little-endian with no padding. The first tensor,
//! `net.config`, records the [`NetConfig`] so a file is self-describing.

use std::fs;
use std::path::Path;

use super::model::NetConfig;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MDW1";
pub const VERSION: u32 = 1;
pub const CONFIG_TENSOR: &str = "net.config";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// Ordered, uniquely named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    pub tensors: Vec<NamedTensor>,
}

impl ModelWeights {
    /// Package network parameters, prefixed by the config record. Biases are
    /// stored with rank 1.
    pub fn from_params(cfg: &NetConfig, params: &[Tensor]) -> Result<Self> {
        let specs = cfg.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} tensors for {} parameters",
                params.len(),
                specs.len()
            )));
        }
        let config = [
            cfg.base_width,
            cfg.ddsc_modules,
            cfg.ddsc_layers_per_module,
            cfg.growth,
            cfg.downsamples,
            cfg.use_global_residual as usize,
        ];
        let mut tensors = vec![NamedTensor {
            name: CONFIG_TENSOR.into(),
            dims: vec![config.len()],
            values: config.iter().map(|&v| v as f32).collect(),
        }];
        for ((name, shape), t) in specs.into_iter().zip(params) {
            if t.shape != shape {
                return Err(Error::Shape(format!("{name}: {:?} expected {shape:?}", t.shape)));
            }
            let dims = if name.ends_with(".bias") {
                vec![shape[0]]
            } else {
                shape.to_vec()
            };
            tensors.push(NamedTensor {
                name,
                dims,
                values: t.data.iter().map(|&v| v as f32).collect(),
            });
        }
        Ok(Self { tensors })
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == CONFIG_TENSOR)
            .ok_or_else(|| Error::Shape(format!("missing {CONFIG_TENSOR} tensor")))?;
        if t.values.len() != 6 || t.values.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Shape(format!("malformed {CONFIG_TENSOR}")));
        }
        let v: Vec<usize> = t.values.iter().map(|&x| x as usize).collect();
        let cfg = NetConfig {
            base_width: v[0],
            ddsc_modules: v[1],
            ddsc_layers_per_module: v[2],
            growth: v[3],
            downsamples: v[4],
            use_global_residual: v[5] != 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Unpack into NCHW tensors in canonical order, checking every name and
    /// shape against `cfg`.
    pub fn to_params(&self, cfg: &NetConfig) -> Result<Vec<Tensor>> {
        let specs = cfg.param_specs();
        let body: Vec<&NamedTensor> = self.tensors.iter().filter(|t| t.name != CONFIG_TENSOR).collect();
        if body.len() != specs.len() {
            return Err(Error::Shape(format!(
                "{} tensors in weights, network needs {}",
                body.len(),
                specs.len()
            )));
        }
        specs
            .into_iter()
            .zip(body)
            .map(|((name, shape), t)| {
                let numel: usize = t.dims.iter().product();
                if t.name != name || numel != shape.iter().product::<usize>() || t.dims[0] != shape[0] {
                    return Err(Error::Shape(format!(
                        "weights tensor {} {:?} does not match {name} {shape:?}",
                        t.name, t.dims
                    )));
                }
                Tensor::from_vec(shape, t.values.iter().map(|&v| v as f64).collect())
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Weights("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Weights(format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors: Vec<NamedTensor> = Vec::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Weights(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            if tensors.iter().any(|t| t.name == name) {
                return Err(Error::Weights(format!("duplicate tensor {name}")));
            }
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    Error::Weights(format!("{name}: shape {dims:?} exceeds the remaining payload"))
                })?;
            let values = r
                .take(numel * 4, "values")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(NamedTensor { name, dims, values });
        }
        if r.remaining() != 0 {
            return Err(Error::Weights(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Weights(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, w.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelWeights::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::init_params;

    fn sample() -> (NetConfig, ModelWeights) {
        let cfg = NetConfig::miniature();
        let w = ModelWeights::from_params(&cfg, &init_params(&cfg, 3, false)).unwrap();
        (cfg, w)
    }

    #[test]
    fn byte_round_trip_and_config_recovery() {
        let (cfg, w) = sample();
        let back = ModelWeights::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.net_config().unwrap(), cfg);
        let params = back.to_params(&cfg).unwrap();
        assert_eq!(params.len(), cfg.param_specs().len());
        assert_eq!(w.tensors[2].name, "stem.bias");
        assert_eq!(w.tensors[2].dims, vec![cfg.base_width]);
    }

    #[test]
    fn header_layout() {
        let (_, w) = sample();
        let b = w.to_bytes();
        assert_eq!(&b[..4], b"MDW1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize, w.tensors.len());
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize, CONFIG_TENSOR.len());
    }

    #[test]
    fn every_truncation_is_a_typed_error() {
        let (_, w) = sample();
        let b = w.to_bytes();
        for cut in (0..b.len()).step_by(97).chain([b.len() - 1]) {
            assert!(matches!(ModelWeights::from_bytes(&b[..cut]), Err(Error::Weights(_))), "cut {cut}");
        }
    }

    #[test]
    fn corruption_cases() {
        let (_, w) = sample();
        let mut b = w.to_bytes();
        b[0] = b'X';
        assert!(ModelWeights::from_bytes(&b).unwrap_err().to_string().contains("magic"));

        let mut b = w.to_bytes();
        b[4] = 2;
        assert!(ModelWeights::from_bytes(&b).unwrap_err().to_string().contains("version"));

        let mut b = w.to_bytes();
        b.push(0);
        assert!(ModelWeights::from_bytes(&b).unwrap_err().to_string().contains("trailing"));

        // Inflate the first dimension of the config tensor past the payload.
        let mut b = w.to_bytes();
        let dim_at = 12 + 4 + CONFIG_TENSOR.len() + 4;
        b[dim_at..dim_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(ModelWeights::from_bytes(&b), Err(Error::Weights(_))));
    }

    #[test]
    fn mismatched_config_is_a_shape_error() {
        let (_, w) = sample();
        assert!(matches!(w.to_params(&NetConfig::with_width(8)), Err(Error::Shape(_))));
    }
}
