//! Procedural Mars-like terrain and heavy-dust patches, used to build a small
//! self-contained corpus for experiments and tests.
//!
//! Terrain is a Perlin height field pitted with craters, lit by a low sun so
//! that slopes facing away fall into shadow, and tinted with a rust palette
//! whose blue channel stays dark. The result has the two features the dust
//! index and the dark-channel estimate key on: strong local contrast and
//! near-zero minimum channels in most neighbourhoods.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::noise::{perlin2d, PerlinParams};
use crate::raster::{save_image, Image};
use crate::rng::{mix, SplitMix64};

/// Surface tint of lit regolith, brightest channel first.
pub const REGOLITH: [f64; 3] = [1.0, 0.64, 0.40];
/// Tint of airborne dust.
pub const DUST: [f64; 3] = [0.86, 0.62, 0.42];

const SUN_ELEVATION: f64 = 0.45;
const RELIEF: f64 = 9.0;

fn fbm(width: usize, height: usize, scale: f64, octaves: u32, seed: u64) -> Result<Vec<f64>> {
    let params = PerlinParams {
        scale,
        octaves,
        lacunarity: 2.0,
        persistence: 0.55,
        seed,
    };
    Ok(perlin2d(&params, width, height)?.values().to_vec())
}

fn add_craters(z: &mut [f64], width: usize, height: usize, rng: &mut SplitMix64) {
    let count = 3 + rng.below(6) as usize;
    let rmax = (width.min(height) as f64 / 5.0).max(4.0);
    for _ in 0..count {
        let cx = rng.next_f64() * width as f64;
        let cy = rng.next_f64() * height as f64;
        let r = 3.0 + rng.next_f64() * (rmax - 3.0);
        let depth = 0.15 + 0.2 * rng.next_f64();
        for y in 0..height {
            for x in 0..width {
                let rho = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() / r;
                let bowl = if rho < 1.0 { -depth * (1.0 - rho * rho) } else { 0.0 };
                let rim = 0.35 * depth * (-((rho - 1.0) / 0.25).powi(2)).exp();
                z[y * width + x] += bowl + rim;
            }
        }
    }
}

/// Render one RGB terrain tile.
pub fn render_terrain(width: usize, height: usize, seed: u64) -> Result<Image> {
    if width < 2 || height < 2 {
        return Err(Error::invalid("dimensions", format!("{width}x{height} is too small")));
    }
    let mut rng = SplitMix64::new(mix(seed, 0));
    let base = (width.max(height) as f64 / 2.0).max(4.0);
    let mut z = fbm(width, height, base, 5, mix(seed, 1))?;
    add_craters(&mut z, width, height, &mut rng);
    let grain = fbm(width, height, 5.0, 2, mix(seed, 2))?;
    let angle = rng.next_f64() * std::f64::consts::TAU;
    let sun = [
        angle.cos() * (1.0 - SUN_ELEVATION * SUN_ELEVATION).sqrt(),
        angle.sin() * (1.0 - SUN_ELEVATION * SUN_ELEVATION).sqrt(),
        SUN_ELEVATION,
    ];

    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, width as isize - 1) as usize;
        let yc = y.clamp(0, height as isize - 1) as usize;
        z[yc * width + xc]
    };
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height as isize {
        for x in 0..width as isize {
            let dx = RELIEF * (at(x + 1, y) - at(x - 1, y));
            let dy = RELIEF * (at(x, y + 1) - at(x, y - 1));
            let norm = (dx * dx + dy * dy + 1.0).sqrt();
            let lit = ((-dx * sun[0] - dy * sun[1] + sun[2]) / norm).max(0.0);
            let albedo = 0.35 + 0.9 * grain[y as usize * width + x as usize];
            let shade = (1.4 * lit * albedo).min(1.0);
            data.extend(REGOLITH.iter().map(|c| c * shade));
        }
    }
    Image::from_vec_clamped(width, height, 3, data)
}

/// A patch covered by optically thick dust: the dust tint with faint texture.
pub fn render_dust_patch(size: usize, seed: u64) -> Result<Image> {
    let grain = fbm(size, size, 6.0, 2, mix(seed, 3))?;
    let data = grain
        .iter()
        .flat_map(|g| DUST.iter().map(move |c| c * (0.9 + 0.1 * g)))
        .collect();
    Image::from_vec_clamped(size, size, 3, data)
}

/// Paths written by [`write_demo_corpus`].
#[derive(Debug, Clone)]
pub struct DemoCorpus {
    pub clean: PathBuf,
    pub heldout: PathBuf,
    pub patches: PathBuf,
}

/// Write `train` and `heldout` terrain tiles of side `size` as 8-bit PNGs,
/// plus eight 16-bit dust patches, under `root`.
pub fn write_demo_corpus(root: impl AsRef<Path>, train: usize, heldout: usize, size: usize, seed: u64) -> Result<DemoCorpus> {
    let root = root.as_ref();
    let corpus = DemoCorpus {
        clean: root.join("clean"),
        heldout: root.join("heldout"),
        patches: root.join("patches"),
    };
    for dir in [&corpus.clean, &corpus.heldout, &corpus.patches] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for i in 0..train {
        let img = render_terrain(size, size, mix(seed, i as u64))?;
        save_image(&img, corpus.clean.join(format!("terrain_{i:03}.png")), 8)?;
    }
    for i in 0..heldout {
        let img = render_terrain(size, size, mix(seed ^ 0xfeed, i as u64))?;
        save_image(&img, corpus.heldout.join(format!("terrain_{i:03}.png")), 8)?;
    }
    for i in 0..8 {
        let img = render_dust_patch(32, mix(seed ^ 0xd057, i))?;
        save_image(&img, corpus.patches.join(format!("dust_{i}.png")), 16)?;
    }
    Ok(corpus)
}
