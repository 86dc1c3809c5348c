use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    InvalidArgument { what: &'static str, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("alpha {alpha} must exceed 2*||A^T A|| = {bound}")]
    AlphaTooSmall { alpha: f64, bound: f64 },

    #[error("degenerate ray {index}: {reason}")]
    DegenerateRay { index: usize, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("corrupt parameter file: {0}")]
    CorruptParams(String),

    #[error("unsupported parameter file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("image decode error: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        what,
        reason: reason.into(),
    }
}

pub(crate) fn shape_mismatch(expected: impl ToString, actual: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
