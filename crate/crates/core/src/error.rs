use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("permitted set has {available} experts but top-k is {k}")]
    PermittedTooSmall { available: usize, k: usize },

    #[error("cache item of {item_bytes} bytes exceeds capacity {capacity} bytes")]
    ItemTooLarge { item_bytes: u64, capacity: u64 },

    #[error("workload inconsistent with parallelism: {0}")]
    InconsistentWorkload(String),

    #[error("HB capacity exceeded: need {needed} bytes, headroom {available} bytes")]
    HbCapacity { needed: u64, available: u64 },

    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("config validation failed for `{key}`: {message}")]
    ConfigValidation { key: String, message: String },

    #[error("scenario `{scenario}`: {source}")]
    Scenario {
        scenario: String,
        #[source]
        source: Box<Error>,
    },

    #[error("refusing to emit an empty result set")]
    EmptyResults,

    #[error("trace parse error at line {line}: {message}")]
    TraceParse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn validation(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::ConfigValidation {
            key: key.into(),
            message: msg.into(),
        }
    }

    /// True when the error originates from configuration loading or validation.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::ConfigParse { .. } | Error::ConfigValidation { .. } => true,
            Error::Scenario { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
