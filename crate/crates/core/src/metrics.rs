//! Dust-density index, PSNR/SSIM, and corpus-level reports.
//!
//! The dust index is a no-reference surrogate for fog-density scores such
//! as FADE. It blends two cues that dust degrades: local luminance contrast
//! drops, and the dark channel rises toward the dust colour.
//!
//! ```text
//! index = 0.5 * (1 - min(1, mean_tile_rms_contrast / 0.2)) + 0.5 * mean_dark_channel
//! ```
//!
//! All reductions sort their inputs before a compensated sum, so the index
//! depends only on the multiset of tile contrasts and dark-channel values.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::raster::{load_image, Image};

/// Tile contrast at which the contrast term saturates.
pub const CONTRAST_NORMALIZER: f64 = 0.2;
/// Side of the square dark-channel window.
pub const DARK_WINDOW: usize = 7;
pub const DEFAULT_TILE: usize = 8;

/// Column label used in every report.
pub const DUST_INDEX_LABEL: &str = "dust_index (FADE-surrogate)";

/// Dust density in [0, 1]; higher means more dust.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct DustIndex(pub f64);

impl DustIndex {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0;
    for v in values {
        if !v.is_finite() || !sum.is_finite() {
            sum += v;
            continue;
        }
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn order_independent_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Per-pixel minimum over channels followed by a square minimum filter of
/// side `window` (clipped at the borders).
pub fn dark_channel(img: &Image, window: usize) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let r = window / 2;
    let per_pixel: Vec<f64> = img
        .data()
        .chunks_exact(img.channels())
        .map(|p| p.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    min_filter(&per_pixel, w, h, r)
}

/// Separable square minimum filter of radius `r`, clipped at the borders.
pub(crate) fn min_filter(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = src[y * w + lo..=y * w + hi]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi)
                .map(|yy| rows[yy * w + x])
                .fold(f64::INFINITY, f64::min);
        }
    }
    out
}

/// Mean RMS luminance contrast over the full `tile`×`tile` tiles of `img`.
pub fn mean_tile_contrast(img: &Image, tile: usize) -> f64 {
    let luma = img.luminance();
    let w = img.width();
    let (nx, ny) = (img.width() / tile, img.height() / tile);
    let mut buf = Vec::with_capacity(tile * tile);
    let mut contrasts = Vec::with_capacity(nx * ny);
    for ty in 0..ny {
        for tx in 0..nx {
            buf.clear();
            for y in ty * tile..(ty + 1) * tile {
                buf.extend_from_slice(&luma[y * w + tx * tile..y * w + (tx + 1) * tile]);
            }
            let mean = order_independent_mean(&mut buf);
            let mut sq: Vec<f64> = buf.iter().map(|v| (v - mean) * (v - mean)).collect();
            contrasts.push(order_independent_mean(&mut sq).sqrt());
        }
    }
    order_independent_mean(&mut contrasts)
}

/// The no-reference dust index of an image.
pub fn dust_index(img: &Image, tile: usize) -> Result<DustIndex> {
    if tile < 2 {
        return Err(Error::invalid("tile", format!("{tile} must be >= 2")));
    }
    if img.width() < tile || img.height() < tile {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} image is smaller than a {tile}px tile",
            img.width(),
            img.height()
        )));
    }
    let contrast = mean_tile_contrast(img, tile);
    let mut dark = dark_channel(img, DARK_WINDOW);
    let dark_mean = order_independent_mean(&mut dark);
    let value = 0.5 * (1.0 - (contrast / CONTRAST_NORMALIZER).min(1.0)) + 0.5 * dark_mean;
    Ok(DustIndex(value.clamp(0.0, 1.0)))
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )))
    }
}

/// Peak signal-to-noise ratio with peak 1. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let mse = compensated_sum(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
        / a.data().len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian of `len` taps.
pub(crate) fn gaussian_taps(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable "valid" correlation of a plane with `kx` along x and `ky` along y.
fn filter_valid(src: &[f64], w: usize, h: usize, kx: &[f64], ky: &[f64]) -> (Vec<f64>, usize, usize) {
    let ow = w - kx.len() + 1;
    let oh = h - ky.len() + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = kx.iter().enumerate().map(|(i, k)| k * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = ky.iter().enumerate().map(|(i, k)| k * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity, averaged over window positions and channels.
/// Uses an 11×11 Gaussian window (σ = 1.5) over fully contained positions;
/// images smaller than 11 px along an axis use a window truncated to that
/// axis.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let kx = gaussian_taps(SSIM_WINDOW.min(w), SSIM_SIGMA);
    let ky = gaussian_taps(SSIM_WINDOW.min(h), SSIM_SIGMA);
    let mut total = Vec::new();
    for c in 0..ch {
        let pa: Vec<f64> = a.data().iter().skip(c).step_by(ch).copied().collect();
        let pb: Vec<f64> = b.data().iter().skip(c).step_by(ch).copied().collect();
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect()
        };
        let (mu_a, _, _) = filter_valid(&pa, w, h, &kx, &ky);
        let (mu_b, _, _) = filter_valid(&pb, w, h, &kx, &ky);
        let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), w, h, &kx, &ky);
        let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), w, h, &kx, &ky);
        let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), w, h, &kx, &ky);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total.push(
                ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2)),
            );
        }
    }
    Ok(compensated_sum(total.iter().copied()) / total.len() as f64)
}

/// Metrics for one image of a labelled set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub path: String,
    pub dust_index: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetSummary {
    pub label: String,
    pub n: usize,
    pub dust_index_mean: f64,
    pub dust_index_std: f64,
    pub psnr_mean: Option<f64>,
    pub ssim_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub sets: Vec<SetSummary>,
    pub rows: Vec<ReportRow>,
    /// Images that could not be read and were left out.
    pub skipped: usize,
}

/// A labelled group of image files.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub label: String,
    pub paths: Vec<PathBuf>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    if mean.is_infinite() {
        return (mean, f64::NAN);
    }
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / n;
    (mean, var.sqrt())
}

/// Encode a float for JSON; infinite PSNR becomes the string `"inf"`.
pub fn json_number(v: f64) -> Value {
    if v.is_infinite() {
        Value::String(if v > 0.0 { "inf" } else { "-inf" }.into())
    } else {
        json!(v)
    }
}

fn fmt_number(v: Option<f64>) -> String {
    match v {
        None => "-".into(),
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) => format!("{v:.4}"),
    }
}

impl CorpusReport {
    /// Aggregate rows into per-label summaries, keeping first-seen label order.
    pub fn from_rows(rows: Vec<ReportRow>, skipped: usize) -> Result<Self> {
        let mut labels: Vec<&str> = Vec::new();
        for r in &rows {
            if !labels.contains(&r.label.as_str()) {
                labels.push(&r.label);
            }
        }
        let mut sets = Vec::new();
        for label in labels {
            let members: Vec<&ReportRow> = rows.iter().filter(|r| r.label == label).collect();
            let idx: Vec<f64> = members.iter().map(|r| r.dust_index).collect();
            let (mean, std) = mean_std(&idx);
            let optional_mean = |get: fn(&ReportRow) -> Option<f64>| {
                let v: Vec<f64> = members.iter().filter_map(|r| get(r)).collect();
                (!v.is_empty()).then(|| mean_std(&v).0)
            };
            sets.push(SetSummary {
                label: label.to_string(),
                n: members.len(),
                dust_index_mean: mean,
                dust_index_std: std,
                psnr_mean: optional_mean(|r| r.psnr),
                ssim_mean: optional_mean(|r| r.ssim),
            });
        }
        Ok(Self {
            sets,
            rows,
            skipped,
        })
    }

    pub fn set(&self, label: &str) -> Option<&SetSummary> {
        self.sets.iter().find(|s| s.label == label)
    }

    pub fn to_json(&self) -> Value {
        let sets: Vec<Value> = self
            .sets
            .iter()
            .map(|s| {
                let mut o = json!({
                    "label": s.label,
                    "n": s.n,
                    "dust_index_mean": s.dust_index_mean,
                    "dust_index_std": s.dust_index_std,
                });
                if let Some(p) = s.psnr_mean {
                    o["psnr_mean"] = json_number(p);
                }
                if let Some(v) = s.ssim_mean {
                    o["ssim_mean"] = json!(v);
                }
                o
            })
            .collect();
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut o = json!({"label": r.label, "path": r.path, "dust_index": r.dust_index});
                if let Some(p) = r.psnr {
                    o["psnr"] = json_number(p);
                }
                if let Some(v) = r.ssim {
                    o["ssim"] = json!(v);
                }
                o
            })
            .collect();
        json!({ "metric": DUST_INDEX_LABEL, "sets": sets, "rows": rows, "skipped": self.skipped })
    }

    /// Aligned plain-text summary table.
    pub fn to_table(&self) -> String {
        let header = ["set", "n", DUST_INDEX_LABEL, "std", "psnr", "ssim"];
        let body: Vec<[String; 6]> = self
            .sets
            .iter()
            .map(|s| {
                [
                    s.label.clone(),
                    s.n.to_string(),
                    format!("{:.4}", s.dust_index_mean),
                    format!("{:.4}", s.dust_index_std),
                    fmt_number(s.psnr_mean),
                    fmt_number(s.ssim_mean),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = vec![line(header.to_vec())];
        out.extend(body.iter().map(|r| line(r.iter().map(String::as_str).collect())));
        out.join("\n") + "\n"
    }
}

/// Score every image of every set. `reference` maps an image path to its
/// clean ground truth, when one exists, for PSNR/SSIM. Unreadable images are
/// skipped and counted.
pub fn corpus_report(
    sets: &[ImageSet],
    reference: &(dyn Fn(&Path) -> Option<PathBuf> + Sync),
) -> Result<CorpusReport> {
    for set in sets {
        if set.paths.is_empty() {
            return Err(Error::invalid("set", format!("'{}' has no images", set.label)));
        }
    }
    let jobs: Vec<(&str, &PathBuf)> = sets
        .iter()
        .flat_map(|s| s.paths.iter().map(move |p| (s.label.as_str(), p)))
        .collect();
    let scored: Vec<Result<Option<ReportRow>>> = jobs
        .par_iter()
        .map(|(label, path)| {
            let img = match load_image(path) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    return Ok(None);
                }
            };
            let dust = dust_index(&img, DEFAULT_TILE)?.value();
            let (mut p, mut s) = (None, None);
            if let Some(ref_path) = reference(path) {
                match load_image(&ref_path) {
                    Ok(clean) if clean.same_dims(&img) => {
                        p = Some(psnr(&img, &clean)?);
                        s = Some(ssim(&img, &clean)?);
                    }
                    Ok(_) => log::warn!("reference {} has different dims", ref_path.display()),
                    Err(e) => log::warn!("reference {}: {e}", ref_path.display()),
                }
            }
            Ok(Some(ReportRow {
                label: label.to_string(),
                path: path.display().to_string(),
                dust_index: dust,
                psnr: p,
                ssim: s,
            }))
        })
        .collect();
    let mut rows = Vec::new();
    let mut skipped = 0;
    for r in scored {
        match r? {
            Some(row) => rows.push(row),
            None => skipped += 1,
        }
    }
    for set in sets {
        if !rows.iter().any(|r| r.label == set.label) {
            return Err(Error::invalid(
                "set",
                format!("no readable images in '{}'", set.label),
            ));
        }
    }
    CorpusReport::from_rows(rows, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::augment;
    use crate::raster::test_util::random_image;

    #[test]
    fn constant_images_have_closed_form_index() {
        let bright = Image::filled(32, 32, &[0.9, 0.9, 0.9]).unwrap();
        assert!((dust_index(&bright, 8).unwrap().value() - 0.95).abs() < 1e-12);
        let black = Image::filled(32, 32, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(dust_index(&black, 8).unwrap().value(), 0.5);
    }

    #[test]
    fn tile_and_size_preconditions() {
        let img = random_image(8, 8, 3, 1);
        assert!(dust_index(&img, 1).is_err());
        assert!(dust_index(&img, 9).is_err());
        assert!(dust_index(&img, 8).is_ok());
    }

    #[test]
    fn index_stays_in_unit_interval() {
        for seed in 0..20 {
            let v = dust_index(&random_image(40, 24, 3, seed), 8).unwrap().value();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn quarter_turns_leave_index_unchanged_exactly() {
        for seed in 0..5 {
            let img = random_image(48, 48, 3, seed);
            let base = dust_index(&img, 8).unwrap();
            for rot in 1..4 {
                assert_eq!(dust_index(&augment(&img, rot, false), 8).unwrap(), base);
            }
            assert_eq!(dust_index(&augment(&img, 0, true), 8).unwrap(), base);
        }
    }

    #[test]
    fn psnr_special_cases() {
        let a = random_image(16, 16, 3, 3).scaled(0.8).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::from_vec(16, 16, 3, a.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &random_image(8, 16, 3, 1)).is_err());
    }

    /// Direct-formula SSIM: explicit weighted sums for every window.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let g = gaussian_taps(11, 1.5);
        let (w, h) = (a.width(), a.height());
        let mut acc = 0.0;
        let mut n = 0.0;
        for c in 0..a.channels() {
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for j in 0..11 {
                        for i in 0..11 {
                            let k = g[i] * g[j];
                            ma += k * a.get(x0 + i, y0 + j, c);
                            mb += k * b.get(x0 + i, y0 + j, c);
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for j in 0..11 {
                        for i in 0..11 {
                            let k = g[i] * g[j];
                            let da = a.get(x0 + i, y0 + j, c) - ma;
                            let db = b.get(x0 + i, y0 + j, c) - mb;
                            va += k * da * da;
                            vb += k * db * db;
                            cov += k * da * db;
                        }
                    }
                    let c1 = 1e-4;
                    let c2 = 9e-4;
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    n += 1.0;
                }
            }
        }
        acc / n
    }

    #[test]
    fn ssim_matches_direct_formula() {
        for seed in 0..4 {
            let a = random_image(32, 32, 3, seed);
            let b = random_image(32, 32, 3, seed + 100);
            let mixed = Image::from_vec(
                32,
                32,
                3,
                a.data().iter().zip(b.data()).map(|(x, y)| 0.7 * x + 0.3 * y).collect(),
            )
            .unwrap();
            for other in [&b, &mixed] {
                let fast = ssim(&a, other).unwrap();
                let slow = ssim_oracle(&a, other);
                assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
            }
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = random_image(20, 13, 1, 9);
        let b = random_image(20, 13, 1, 10);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        let tiny = random_image(5, 4, 3, 2);
        assert!((ssim(&tiny, &tiny).unwrap() - 1.0).abs() < 1e-12);
    }

    fn row(label: &str, v: f64) -> ReportRow {
        ReportRow {
            label: label.into(),
            path: format!("{label}-{v}"),
            dust_index: v,
            psnr: None,
            ssim: None,
        }
    }

    #[test]
    fn single_image_set_has_zero_std() {
        let r = CorpusReport::from_rows(vec![row("clean", 0.31)], 0).unwrap();
        assert_eq!(r.sets[0].dust_index_mean, 0.31);
        assert_eq!(r.sets[0].dust_index_std, 0.0);
    }

    #[test]
    fn set_means_match_scalar_loop() {
        let mut r = crate::rng::SplitMix64::new(4);
        let values: Vec<f64> = (0..997).map(|_| r.next_f64()).collect();
        let rows = values.iter().map(|&v| row("dusty", v)).collect();
        let report = CorpusReport::from_rows(rows, 0).unwrap();
        let mut naive = 0.0;
        for v in &values {
            naive += v;
        }
        naive /= values.len() as f64;
        assert!((report.sets[0].dust_index_mean - naive).abs() < 1e-12);
    }

    #[test]
    fn json_and_table_layout() {
        let mut rows = vec![row("clean", 0.2), row("dusty", 0.7)];
        rows[1].psnr = Some(f64::INFINITY);
        rows[1].ssim = Some(1.0);
        let report = CorpusReport::from_rows(rows, 1).unwrap();
        let v = report.to_json();
        assert_eq!(v["sets"][0]["label"], "clean");
        assert!(v["sets"][0].get("psnr_mean").is_none());
        assert_eq!(v["sets"][1]["psnr_mean"], "inf");
        assert_eq!(v["skipped"], 1);
        let table = report.to_table();
        assert!(table.contains(DUST_INDEX_LABEL));
        assert!(table.lines().nth(2).unwrap().contains("inf"));
    }
}
