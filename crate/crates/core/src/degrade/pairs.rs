//! Paired clean/dusty dataset generation.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::manifest::ManifestRecord;
use super::{
    estimate_atmospheric_light, make_transmission, synthesize_dusty, Alpha, AtmosphericLight,
    Reflexivity, TransmissionMap,
};
use crate::error::{Error, Result};
use crate::noise::{perlin2d, sample_params, ParamRanges};
use crate::raster::{list_pngs, load_image, save_image, Image};
use crate::rng::{mix, SplitMix64};

/// Dust amplitudes used by the reference synthesis protocol.
pub const DEFAULT_ALPHAS: [f64; 7] = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Stream index reserved for the per-image alpha permutation.
const ALPHA_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone)]
pub struct PairOptions {
    pub maps_per_image: usize,
    /// Each image draws its alphas from this set without replacement,
    /// reshuffling once the set is used up.
    pub alpha_set: Vec<f64>,
    pub ranges: ParamRanges,
    pub seed: u64,
    /// Worker threads; output is identical for every value.
    pub jobs: usize,
    /// Bit depth of the written dusty PNGs.
    pub bit_depth: u8,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            maps_per_image: 7,
            alpha_set: DEFAULT_ALPHAS.to_vec(),
            ranges: ParamRanges::default(),
            seed: 0,
            jobs: 1,
            bit_depth: 16,
        }
    }
}

impl PairOptions {
    fn validate(&self) -> Result<()> {
        if self.maps_per_image == 0 {
            return Err(Error::invalid("maps_per_image", "must be >= 1"));
        }
        if self.alpha_set.is_empty() {
            return Err(Error::invalid("alpha_set", "is empty"));
        }
        for &a in &self.alpha_set {
            Alpha::new(a)?;
        }
        if self.jobs == 0 {
            return Err(Error::invalid("jobs", "must be >= 1"));
        }
        if self.bit_depth != 8 && self.bit_depth != 16 {
            return Err(Error::invalid("bit_depth", "expected 8 or 16"));
        }
        self.ranges.validate()
    }

    /// Alpha for map `j` of the image with seed `image_seed`.
    fn alpha_for(&self, image_seed: u64, j: usize) -> f64 {
        let n = self.alpha_set.len();
        let (cycle, pos) = (j / n, j % n);
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::new(mix(image_seed, ALPHA_STREAM + cycle as u64)).shuffle(&mut order);
        self.alpha_set[order[pos]]
    }
}

/// The transmission map a record describes, at the given image size.
pub fn record_transmission(record: &ManifestRecord, width: usize, height: usize) -> Result<TransmissionMap> {
    let noise = perlin2d(&record.params, width, height)?;
    Ok(make_transmission(&noise, Alpha::new(record.alpha)?))
}

/// Re-synthesize the dusty image described by `record` from its clean image.
pub fn replay(record: &ManifestRecord, clean: &Image) -> Result<Image> {
    let t = record_transmission(record, clean.width(), clean.height())?;
    synthesize_dusty(clean, &t, &AtmosphericLight::new(record.light.clone())?)
}

/// Synthesize `maps_per_image` dusty variants of every PNG in `clean_dir`,
/// writing them to `out_dir` and returning one manifest record per pair in
/// (image, map) order.
pub fn generate_pairs(
    clean_dir: impl AsRef<Path>,
    phi: &Reflexivity,
    opts: &PairOptions,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestRecord>> {
    opts.validate()?;
    let clean_dir = clean_dir.as_ref();
    let out_dir = out_dir.as_ref();
    let inputs = list_pngs(clean_dir)?;
    if inputs.is_empty() {
        return Err(Error::invalid(
            "clean_dir",
            format!("no PNG images in {}", clean_dir.display()),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let work = |(index, path): (usize, &std::path::PathBuf)| -> Result<Vec<ManifestRecord>> {
        let clean = load_image(path)?;
        let light = estimate_atmospheric_light(&clean, phi)?;
        let image_seed = mix(opts.seed, index as u64);
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        let mut records = Vec::with_capacity(opts.maps_per_image);
        for j in 0..opts.maps_per_image {
            let params = sample_params(mix(image_seed, j as u64), &opts.ranges)?;
            let record = ManifestRecord {
                clean: path.display().to_string(),
                dusty: out_dir.join(format!("{stem}_d{j}.png")).display().to_string(),
                params,
                alpha: opts.alpha_for(image_seed, j),
                light: light.values().to_vec(),
            };
            let dusty = replay(&record, &clean)?;
            save_image(&dusty, &record.dusty, opts.bit_depth)?;
            records.push(record);
        }
        log::debug!("{}: {} dusty variants", path.display(), records.len());
        Ok(records)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::invalid("jobs", e.to_string()))?;
    let per_image: Vec<Result<Vec<ManifestRecord>>> =
        pool.install(|| inputs.par_iter().enumerate().map(work).collect());
    let mut records = Vec::with_capacity(inputs.len() * opts.maps_per_image);
    for r in per_image {
        records.extend(r?);
    }
    log::info!(
        "synthesized {} pairs from {} clean images",
        records.len(),
        inputs.len()
    );
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::test_util::random_image;

    fn write_clean(dir: &Path, n: usize) {
        for i in 0..n {
            save_image(&random_image(24, 20, 3, i as u64), dir.join(format!("c{i:02}.png")), 8).unwrap();
        }
    }

    #[test]
    fn every_alpha_used_once_per_image() {
        let opts = PairOptions::default();
        for seed in 0..50 {
            let mut alphas: Vec<f64> = (0..7).map(|j| opts.alpha_for(seed, j)).collect();
            alphas.sort_by(f64::total_cmp);
            assert_eq!(alphas, DEFAULT_ALPHAS);
        }
    }

    #[test]
    fn counts_replay_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let clean = dir.path().join("clean");
        fs::create_dir(&clean).unwrap();
        write_clean(&clean, 3);
        let phi = Reflexivity::new(vec![1.0, 0.8, 0.6]).unwrap();
        let opts = PairOptions {
            seed: 9,
            ..PairOptions::default()
        };
        let out = dir.path().join("a");
        let records = generate_pairs(&clean, &phi, &opts, &out).unwrap();
        assert_eq!(records.len(), 21);
        for r in &records {
            let c = load_image(&r.clean).unwrap();
            let replayed = replay(r, &c).unwrap();
            let stored = load_image(&r.dusty).unwrap();
            for (a, b) in replayed.data().iter().zip(stored.data()) {
                assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
            }
        }

        let out_b = dir.path().join("b");
        let again = generate_pairs(&clean, &phi, &PairOptions { jobs: 3, ..opts.clone() }, &out_b).unwrap();
        for (r, s) in records.iter().zip(&again) {
            assert_eq!((r.params, r.alpha, &r.light), (s.params, s.alpha, &s.light));
            assert_eq!(fs::read(&r.dusty).unwrap(), fs::read(&s.dusty).unwrap());
        }
    }

    #[test]
    fn empty_directory_and_bad_options_fail() {
        let dir = tempfile::tempdir().unwrap();
        let phi = Reflexivity::new(vec![1.0; 3]).unwrap();
        let err = generate_pairs(dir.path(), &phi, &PairOptions::default(), dir.path().join("o"));
        assert!(matches!(err, Err(Error::Validation { param: "clean_dir", .. })));

        write_clean(dir.path(), 1);
        let bad = PairOptions {
            alpha_set: vec![0.5, 1.5],
            ..PairOptions::default()
        };
        assert!(generate_pairs(dir.path(), &phi, &bad, dir.path().join("o")).is_err());
    }
}
