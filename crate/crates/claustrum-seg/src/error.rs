//! Error types shared across the toolkit.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("truncated NIfTI file at byte offset {offset}: {detail}")]
    Truncated { offset: usize, detail: String },

    #[error("unsupported NIfTI datatype code {code} (at header byte offset 70)")]
    UnsupportedDatatype { code: i16 },

    #[error("bad NIfTI magic {found:?} at byte offset 344")]
    BadMagic { found: [u8; 4] },

    #[error("invalid NIfTI dimensions at byte offset 40: {detail}")]
    BadDims { detail: String },

    #[error("value {value} out of range for datatype {datatype}")]
    OutOfRange { value: f64, datatype: String },

    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
