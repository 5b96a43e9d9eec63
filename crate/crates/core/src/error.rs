use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions {channels}x{height}x{width}: every dimension must be at least 1")]
    InvalidDimension {
        channels: usize,
        height: usize,
        width: usize,
    },

    #[error("index out of bounds: {0}")]
    Index(String),

    #[error("value {0} is outside [0, 1] or not finite")]
    Value(f64),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("png decode error: {0}")]
    PngDecode(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("weight file format error in tensor `{tensor}`: {message}")]
    WeightFormat { tensor: String, message: String },

    #[error("network configuration error: {0}")]
    Configuration(String),

    #[error("transport error (request {request_id}): {message}")]
    Transport { request_id: u64, message: String },

    #[error("protocol error (request {request_id}): {message}")]
    Protocol { request_id: u64, message: String },

    #[error("genome validation error: {0}")]
    Genome(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training not supported: {0}")]
    UnsupportedTraining(String),

    #[error("insufficient fooling images for class {class}: need {needed}, have {available}")]
    Capacity {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("idx format error: {0}")]
    Idx(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the classifier endpoint itself, as opposed to
    /// bad inputs or configuration.
    pub fn is_oracle_failure(&self) -> bool {
        matches!(self, Error::Transport { .. } | Error::Protocol { .. })
    }
}
