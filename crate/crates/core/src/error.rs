use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: loss does not depend on any parameter that requires grad")]
    Detached,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("format: {0}")]
    Format(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("unsupported format version: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("count mismatch: manifest lists {manifest} records, file holds {found}")]
    CountMismatch { manifest: usize, found: usize },

    #[error("corrupt offsets: {0}")]
    CorruptOffsets(String),

    #[error("io: {0}")]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
