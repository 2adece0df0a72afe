//! Dust removal: exact inversion of the forward model when the transmission
//! map and atmospheric light are known, a dark-channel estimate when they are
//! not, and dispatch to a trained network.

use std::path::Path;
use std::sync::Arc;

use crate::degrade::{
    estimate_atmospheric_light, estimate_reflexivity, record_transmission, select_dusty_tiles,
    AtmosphericLight, DustyPatchSet, ManifestRecord, TransmissionMap,
};
use crate::error::{Error, Result};
use crate::metrics::min_filter;
use crate::nn::{load_weights, restore_image, ModelWeights};
use crate::raster::Image;

pub const T_FLOOR: f64 = 0.05;
pub const DEFAULT_WINDOW: usize = 15;
pub const DEFAULT_OMEGA: f64 = 0.95;

/// Tile side and count used to pick the dustiest regions of an input when
/// estimating its atmospheric light.
pub const LIGHT_TILE: usize = 32;
pub const LIGHT_TOP_K: usize = 4;

#[derive(Debug, Clone)]
pub enum RestoreMethod {
    /// Invert with the transmission map and light recorded for the pair.
    AnalyticKnown(ManifestRecord),
    /// Invert with a dark-channel transmission estimate and a light estimated
    /// from the input's own dustiest tiles.
    AnalyticEstimated,
    Learned(Arc<ModelWeights>),
}

impl RestoreMethod {
    pub fn learned(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::Learned(Arc::new(load_weights(path)?)))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::AnalyticKnown(_) => "analytic-known",
            Self::AnalyticEstimated => "analytic-est",
            Self::Learned(_) => "learned",
        }
    }
}

/// `C = (H - L * (1 - T')) / T'` with `T' = max(T, t_floor)`, clamped to [0, 1].
pub fn invert_degradation(
    h: &Image,
    t: &TransmissionMap,
    light: &AtmosphericLight,
    t_floor: f64,
) -> Result<Image> {
    if !(t_floor > 0.0 && t_floor < 1.0) {
        return Err(Error::invalid("t_floor", format!("{t_floor} outside (0, 1)")));
    }
    t.check_matches(h)?;
    light.check_matches(h)?;
    let l = light.values();
    let c = h.channels();
    let mut out = Vec::with_capacity(h.data().len());
    for (px, &tx) in h.data().chunks_exact(c).zip(t.values()) {
        let tp = tx.max(t_floor);
        for (v, lc) in px.iter().zip(l) {
            out.push(((v - lc * (1.0 - tp)) / tp).clamp(0.0, 1.0));
        }
    }
    Image::from_vec(h.width(), h.height(), c, out)
}

/// Dark-channel transmission estimate:
/// `T(x) = clamp(1 - omega * min_window min_c H(., c) / L(c), T_FLOOR, 1)`.
pub fn estimate_transmission(
    h: &Image,
    light: &AtmosphericLight,
    window: usize,
    omega: f64,
) -> Result<TransmissionMap> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid("window", format!("{window} must be odd and >= 1")));
    }
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::invalid("omega", format!("{omega} outside (0, 1]")));
    }
    light.check_matches(h)?;
    let l = light.values();
    if let Some(c) = l.iter().position(|&v| v <= 0.0) {
        return Err(Error::Estimation(format!("atmospheric light is zero in channel {c}")));
    }
    let ratio: Vec<f64> = h
        .data()
        .chunks_exact(h.channels())
        .map(|px| {
            px.iter()
                .zip(l)
                .map(|(v, lc)| v / lc)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let dark = min_filter(&ratio, h.width(), h.height(), window / 2);
    let values = dark
        .iter()
        .map(|d| (1.0 - omega * d).clamp(T_FLOOR, 1.0))
        .collect();
    TransmissionMap::from_vec(h.width(), h.height(), values)
}

/// Atmospheric light of a dusty image from its own dustiest tiles.
pub fn estimate_light_from_dusty(h: &Image) -> Result<AtmosphericLight> {
    let patches = select_dusty_tiles(h, LIGHT_TILE, LIGHT_TOP_K)?;
    let est = estimate_reflexivity(&DustyPatchSet { patches })?;
    estimate_atmospheric_light(h, &est.phi)
}

pub fn remove_dust(h: &Image, method: &RestoreMethod) -> Result<Image> {
    match method {
        RestoreMethod::AnalyticKnown(record) => {
            let t = record_transmission(record, h.width(), h.height())?;
            let light = AtmosphericLight::new(record.light.clone())?;
            invert_degradation(h, &t, &light, T_FLOOR)
        }
        RestoreMethod::AnalyticEstimated => {
            let light = estimate_light_from_dusty(h)?;
            let t = estimate_transmission(h, &light, DEFAULT_WINDOW, DEFAULT_OMEGA)?;
            invert_degradation(h, &t, &light, T_FLOOR)
        }
        RestoreMethod::Learned(weights) => restore_image(weights, h),
    }
}
