//! Synthesis, removal and evaluation of dust storms in orbital imagery.
//!
//! The pipeline mirrors how dusty training data is built and consumed:
//!
//! 1. [`noise`] draws multi-octave Perlin fields that stand in for the
//!    spatial structure of a storm.
//! 2. [`degrade`] turns a field into a transmission map, estimates the dust
//!    colour from heavy-dust patches, and blends clean images toward it.
//! 3. [`restore`] undoes the blend, either analytically or with the
//!    encoder-decoder in [`nn`].
//! 4. [`metrics`] scores dust density without a reference, plus PSNR/SSIM
//!    against synthetic ground truth.

pub mod degrade;
pub mod nn;
pub mod error;
pub mod metrics;
pub mod noise;
pub mod raster;
pub mod restore;
pub mod rng;
pub mod terrain;

pub use error::{Error, Result};
pub use raster::{Image, PatchRegion};
