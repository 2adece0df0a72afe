//! Seeded multi-octave 2D Perlin noise.
//!
//! Each octave owns a 256-entry permutation table produced by a Fisher-Yates
//! shuffle driven by [`SplitMix64`] seeded with `mix(seed, octave)`. Fields
//! are normalized with a fixed affine map (not per-field min/max), so the
//! amplitude of a dust map is controlled by the caller alone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::rng::{mix, uniform_at, SplitMix64};

/// Parameters of a multi-octave Perlin field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerlinParams {
    /// Lattice cell size of the first octave, in pixels.
    pub scale: f64,
    pub octaves: u32,
    /// Frequency multiplier between consecutive octaves.
    pub lacunarity: f64,
    /// Amplitude multiplier between consecutive octaves.
    pub persistence: f64,
    pub seed: u64,
}

impl PerlinParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid("scale", format!("{} must be > 0", self.scale)));
        }
        if self.octaves < 1 {
            return Err(Error::invalid("octaves", "must be >= 1"));
        }
        if !(self.lacunarity > 1.0 && self.lacunarity.is_finite()) {
            return Err(Error::invalid(
                "lacunarity",
                format!("{} must be > 1", self.lacunarity),
            ));
        }
        if !(self.persistence > 0.0 && self.persistence <= 1.0) {
            return Err(Error::invalid(
                "persistence",
                format!("{} must be in (0, 1]", self.persistence),
            ));
        }
        Ok(())
    }
}

/// Single-channel field of values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl NoiseField {
    pub fn from_vec(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("dimensions", format!("{width}x{height} is empty")));
        }
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} field",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("noise value", format!("{v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Gray image view, e.g. for saving as a 16-bit PNG.
    pub fn to_image(&self) -> Image {
        Image::from_vec(self.width, self.height, 1, self.values.clone())
            .expect("noise values are in [0, 1]")
    }
}

const GRADIENTS: [(f64, f64); 8] = [
    (1.0, 1.0),
    (-1.0, 1.0),
    (1.0, -1.0),
    (-1.0, -1.0),
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
];

/// One octave of classic gradient noise with a seeded permutation table.
#[derive(Debug, Clone)]
pub struct Perlin {
    perm: [u8; 256],
}

impl Perlin {
    pub fn new(seed: u64) -> Self {
        let mut perm: [u8; 256] = std::array::from_fn(|i| i as u8);
        SplitMix64::new(seed).shuffle(&mut perm);
        Self { perm }
    }

    #[inline]
    fn hash(&self, ix: i64, iy: i64) -> usize {
        let a = self.perm[(ix & 255) as usize] as i64;
        self.perm[((a + iy) & 255) as usize] as usize
    }

    #[inline]
    fn corner(&self, ix: i64, iy: i64, dx: f64, dy: f64) -> f64 {
        let (gx, gy) = GRADIENTS[self.hash(ix, iy) & 7];
        gx * dx + gy * dy
    }

    /// Raw noise in [-1, 1]; exactly 0 on integer lattice points.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (xf, yf) = (x.floor(), y.floor());
        let (ix, iy) = (xf as i64, yf as i64);
        let (dx, dy) = (x - xf, y - yf);
        let n00 = self.corner(ix, iy, dx, dy);
        let n10 = self.corner(ix + 1, iy, dx - 1.0, dy);
        let n01 = self.corner(ix, iy + 1, dx, dy - 1.0);
        let n11 = self.corner(ix + 1, iy + 1, dx - 1.0, dy - 1.0);
        let (u, v) = (fade(dx), fade(dy));
        lerp(v, lerp(u, n00, n10), lerp(u, n01, n11))
    }
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn lerp(t: f64, a: f64, b: f64) -> f64 {
    a + t * (b - a)
}

/// Generate a `width`×`height` multi-octave field. Pixel `(x, y)` samples the
/// noise at `(x, y) · lacunarity^o / scale` for octave `o`.
pub fn perlin2d(params: &PerlinParams, width: usize, height: usize) -> Result<NoiseField> {
    params.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::invalid("dimensions", format!("{width}x{height} is empty")));
    }
    let octaves: Vec<(Perlin, f64, f64)> = (0..params.octaves)
        .map(|o| {
            let freq = params.lacunarity.powi(o as i32) / params.scale;
            let amp = params.persistence.powi(o as i32);
            (Perlin::new(mix(params.seed, o as u64)), freq, amp)
        })
        .collect();
    let total_amp: f64 = octaves.iter().map(|(_, _, a)| a).sum();

    let mut values = vec![0.0; width * height];
    values
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, out) in row.iter_mut().enumerate() {
                let mut sum = 0.0;
                for (noise, freq, amp) in &octaves {
                    sum += amp * noise.sample(x as f64 * freq, y as f64 * freq);
                }
                *out = (0.5 * (sum / total_amp + 1.0)).clamp(0.0, 1.0);
            }
        });
    Ok(NoiseField {
        width,
        height,
        values,
    })
}

/// Inclusive sampling ranges for [`sample_params`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub scale: (f64, f64),
    pub octaves: (u32, u32),
    pub lacunarity: (f64, f64),
    pub persistence: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            scale: (64.0, 512.0),
            octaves: (2, 5),
            lacunarity: (1.8, 2.2),
            persistence: (0.4, 0.7),
        }
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<()> {
        fn ordered<T: PartialOrd + std::fmt::Display>(name: &'static str, r: (T, T)) -> Result<()> {
            if r.0 <= r.1 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("inverted range [{}, {}]", r.0, r.1)))
            }
        }
        ordered("scale", self.scale)?;
        ordered("octaves", self.octaves)?;
        ordered("lacunarity", self.lacunarity)?;
        ordered("persistence", self.persistence)
    }
}

fn uniform_in(seed: u64, k: u64, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    lo + uniform_at(seed, k) * (hi - lo)
}

/// Draw Perlin parameters uniformly from `ranges`. Draw `k` uses the `k`-th
/// counter of the stream keyed by `rng_seed`; the noise seed is draw 4.
pub fn sample_params(rng_seed: u64, ranges: &ParamRanges) -> Result<PerlinParams> {
    ranges.validate()?;
    let (olo, ohi) = ranges.octaves;
    let span = (ohi - olo) as u64 + 1;
    let octaves = olo + ((uniform_at(rng_seed, 1) * span as f64) as u64).min(span - 1) as u32;
    let params = PerlinParams {
        scale: uniform_in(rng_seed, 0, ranges.scale),
        octaves,
        lacunarity: uniform_in(rng_seed, 2, ranges.lacunarity),
        persistence: uniform_in(rng_seed, 3, ranges.persistence),
        seed: mix(rng_seed, 4),
    };
    params.validate()?;
    Ok(params)
}
