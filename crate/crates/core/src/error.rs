use std::io;

use thiserror::Error;

/// Errors produced anywhere in the compression pipeline.
#[derive(Debug, Error)]
pub enum ArfcError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("truncated or malformed file: {0}")]
    Truncated(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = ArfcError> = std::result::Result<T, E>;

impl ArfcError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        ArfcError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ArfcError::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        ArfcError::Config(msg.into())
    }
}
