//! JSON-lines dataset manifest: one record per clean/dusty pair.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::noise::PerlinParams;

/// Everything needed to re-synthesize one dusty image from its clean source.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub clean: String,
    pub dusty: String,
    pub params: PerlinParams,
    pub alpha: f64,
    pub light: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    clean: String,
    dusty: String,
    scale: f64,
    octaves: u32,
    lacunarity: f64,
    persistence: f64,
    alpha: f64,
    light: Vec<f64>,
    seed: u64,
}

/// 17 significant digits; parses back to the identical f64.
fn float17(v: f64) -> String {
    format!("{v:.16e}")
}

impl ManifestRecord {
    pub fn to_json_line(&self) -> String {
        let light: Vec<String> = self.light.iter().map(|&v| float17(v)).collect();
        format!(
            "{{\"clean\":{},\"dusty\":{},\"scale\":{},\"octaves\":{},\"lacunarity\":{},\"persistence\":{},\"alpha\":{},\"light\":[{}],\"seed\":{}}}",
            serde_json::Value::String(self.clean.clone()),
            serde_json::Value::String(self.dusty.clone()),
            float17(self.params.scale),
            self.params.octaves,
            float17(self.params.lacunarity),
            float17(self.params.persistence),
            float17(self.alpha),
            light.join(","),
            self.params.seed,
        )
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| Error::Manifest(e.to_string()))?;
        let params = PerlinParams {
            scale: raw.scale,
            octaves: raw.octaves,
            lacunarity: raw.lacunarity,
            persistence: raw.persistence,
            seed: raw.seed,
        };
        params
            .validate()
            .map_err(|e| Error::Manifest(e.to_string()))?;
        Ok(Self {
            clean: raw.clean,
            dusty: raw.dusty,
            params,
            alpha: raw.alpha,
            light: raw.light,
        })
    }

    /// File name of the dusty image, used to match restored outputs back to
    /// their record.
    pub fn dusty_file_name(&self) -> Option<&str> {
        Path::new(&self.dusty).file_name().and_then(|n| n.to_str())
    }
}

/// Resolve a manifest path: as written if it exists, otherwise relative to
/// the directory holding the manifest.
pub fn resolve(manifest_dir: &Path, p: &str) -> PathBuf {
    let direct = PathBuf::from(p);
    if direct.is_absolute() || direct.exists() {
        direct
    } else {
        manifest_dir.join(direct)
    }
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        writeln!(out, "{}", r.to_json_line()).expect("writing to a Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            ManifestRecord::from_json_line(l).map_err(|e| match e {
                Error::Manifest(m) => Error::Manifest(format!("{}:{}: {m}", path.display(), i + 1)),
                other => other,
            })
        })
        .collect()
}
