//! Forward dust model: transmission maps, reflexivity and atmospheric light
//! estimation, dusty-image synthesis, and paired dataset generation.
//!
//! A dusty image is a per-pixel convex blend of the clean image and the
//! atmospheric light,
//!
//! ```text
//! H(x, c) = C(x, c) * T(x) + L(c) * (1 - T(x)),   T(x) = 1 - alpha * M(x)
//! ```
//!
//! where `M` is a Perlin noise field. `T` carries no channel dependence;
//! colour enters only through `L`.

mod manifest;
mod pairs;

pub use manifest::{read_manifest, resolve as resolve_manifest_path, write_manifest, ManifestRecord};
pub use pairs::{generate_pairs, record_transmission, replay, PairOptions, DEFAULT_ALPHAS};

use crate::error::{Error, Result};
use crate::metrics;
use crate::noise::NoiseField;
use crate::raster::{crop_patch, Image, PatchRegion};

/// Per-pixel transmission ratio in [0, 1], shared by all channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl TransmissionMap {
    pub fn from_vec(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} transmission map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("transmission", format!("{v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn uniform(width: usize, height: usize, t: f64) -> Result<Self> {
        Self::from_vec(width, height, vec![t; width * height])
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

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(1.0, f64::min)
    }

    pub(crate) fn check_matches(&self, img: &Image) -> Result<()> {
        if self.width != img.width() || self.height != img.height() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} transmission map for a {}x{} image",
                self.width,
                self.height,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }
}

/// Dust amplitude in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Alpha(f64);

impl Alpha {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value <= 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::invalid("alpha", format!("{value} outside (0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Per-channel reflectance of heavy dust relative to its brightest channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Reflexivity(Vec<f64>);

impl Reflexivity {
    pub fn new(phi: Vec<f64>) -> Result<Self> {
        if phi.is_empty() {
            return Err(Error::invalid("reflexivity", "no channels"));
        }
        if let Some(v) = phi.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::invalid("reflexivity", format!("{v} outside (0, 1]")));
        }
        Ok(Self(phi))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Per-channel atmospheric light in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AtmosphericLight(Vec<f64>);

impl AtmosphericLight {
    pub fn new(light: Vec<f64>) -> Result<Self> {
        if light.is_empty() {
            return Err(Error::invalid("light", "no channels"));
        }
        if let Some(v) = light.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("light", format!("{v} outside [0, 1]")));
        }
        Ok(Self(light))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn check_matches(&self, img: &Image) -> Result<()> {
        if self.0.len() != img.channels() {
            return Err(Error::DimensionMismatch(format!(
                "{} light channels for a {} channel image",
                self.0.len(),
                img.channels()
            )));
        }
        Ok(())
    }
}

/// Image patches covered by heavy dust.
#[derive(Debug, Clone, Default)]
pub struct DustyPatchSet {
    pub patches: Vec<Image>,
}

/// Result of [`estimate_reflexivity`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReflexivityEstimate {
    pub phi: Reflexivity,
    /// Pixels whose channel maximum was zero and were left out.
    pub skipped_pixels: usize,
    /// Patches with no usable pixel, left out of the outer average.
    pub skipped_patches: usize,
}

/// `T(x) = 1 - alpha * M(x)`.
pub fn make_transmission(noise: &NoiseField, alpha: Alpha) -> TransmissionMap {
    let a = alpha.value();
    TransmissionMap {
        width: noise.width(),
        height: noise.height(),
        values: noise.values().iter().map(|m| 1.0 - a * m).collect(),
    }
}

/// Average, over patches, of the per-patch mean of `H(x, c) / max_c' H(x, c')`.
pub fn estimate_reflexivity(set: &DustyPatchSet) -> Result<ReflexivityEstimate> {
    let first = set
        .patches
        .first()
        .ok_or_else(|| Error::Estimation("empty dusty patch set".into()))?;
    let channels = first.channels();
    let mut sum = vec![0.0; channels];
    let mut used = 0usize;
    let mut skipped_pixels = 0usize;
    let mut skipped_patches = 0usize;

    for patch in &set.patches {
        if patch.channels() != channels {
            return Err(Error::DimensionMismatch(format!(
                "patch with {} channels in a {channels} channel set",
                patch.channels()
            )));
        }
        let mut inner = vec![0.0; channels];
        let mut counted = 0usize;
        for px in patch.data().chunks_exact(channels) {
            let peak = px.iter().copied().fold(0.0, f64::max);
            if peak <= 0.0 {
                skipped_pixels += 1;
                continue;
            }
            for (acc, v) in inner.iter_mut().zip(px) {
                *acc += v / peak;
            }
            counted += 1;
        }
        if counted == 0 {
            skipped_patches += 1;
            continue;
        }
        for (s, v) in sum.iter_mut().zip(&inner) {
            *s += v / counted as f64;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Estimation("every patch is fully black".into()));
    }
    if skipped_pixels > 0 {
        log::warn!("reflexivity: skipped {skipped_pixels} zero-valued pixels");
    }
    let phi: Vec<f64> = sum.iter().map(|s| (s / used as f64).min(1.0)).collect();
    if let Some(c) = phi.iter().position(|&v| v <= 0.0) {
        return Err(Error::Estimation(format!("channel {c} has zero reflexivity")));
    }
    Ok(ReflexivityEstimate {
        phi: Reflexivity::new(phi)?,
        skipped_pixels,
        skipped_patches,
    })
}

/// `L(c) = phi(c) * max over all pixels and channels of the image`.
pub fn estimate_atmospheric_light(img: &Image, phi: &Reflexivity) -> Result<AtmosphericLight> {
    if phi.values().len() != img.channels() {
        return Err(Error::DimensionMismatch(format!(
            "{} reflexivity channels for a {} channel image",
            phi.values().len(),
            img.channels()
        )));
    }
    let peak = img.max_sample();
    AtmosphericLight::new(phi.values().iter().map(|p| p * peak).collect())
}

/// Blend `img` toward `light` by `1 - T` at every pixel.
pub fn synthesize_dusty(img: &Image, t: &TransmissionMap, light: &AtmosphericLight) -> Result<Image> {
    t.check_matches(img)?;
    light.check_matches(img)?;
    let l = light.values();
    let c = img.channels();
    let mut out = Vec::with_capacity(img.data().len());
    for (px, &tx) in img.data().chunks_exact(c).zip(&t.values) {
        for (v, lc) in px.iter().zip(l) {
            out.push((v * tx + lc * (1.0 - tx)).clamp(0.0, 1.0));
        }
    }
    Image::from_vec(img.width(), img.height(), c, out)
}

/// Pick the `k` square tiles of side `tile` with the highest dust index.
/// Images smaller than one tile contribute themselves whole. Ties keep
/// raster order.
pub fn select_dusty_tiles(img: &Image, tile: usize, k: usize) -> Result<Vec<Image>> {
    if img.width() < tile || img.height() < tile {
        return Ok(vec![img.clone()]);
    }
    let score_tile = metrics::DEFAULT_TILE.min(tile);
    let mut scored = Vec::new();
    for ty in 0..img.height() / tile {
        for tx in 0..img.width() / tile {
            let patch = crop_patch(img, PatchRegion::new(tx * tile, ty * tile, tile, tile))?;
            let score = metrics::dust_index(&patch, score_tile)?.value();
            scored.push((score, patch));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored.into_iter().take(k.max(1)).map(|(_, p)| p).collect())
}
