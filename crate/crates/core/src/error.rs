use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the dust pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("invalid {param}: {reason}")]
    Validation { param: &'static str, reason: String },

    #[error("region {region} lies outside a {width}x{height} image")]
    Bounds {
        region: String,
        width: usize,
        height: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("corrupt weights file: {0}")]
    Weights(String),

    #[error("shape error: {0}")]
    Shape(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(param: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            param,
            reason: reason.into(),
        }
    }

    /// True for failures caused by the filesystem or unreadable files
    /// (images, manifests, weights), as opposed to bad parameters or
    /// inconsistent inputs.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Decode { .. } | Error::Manifest(_) | Error::Weights(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
