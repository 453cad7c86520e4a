use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GlmcError>;

#[derive(Debug, Error)]
pub enum GlmcError {
    /// A configuration value failed to parse or validate. `key` is the dotted path.
    #[error("invalid config at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("invalid imbalance spec: {0}")]
    InvalidSpec(String),

    #[error("class {class} has {available} source samples but {needed} are required")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("exponent must be non-negative, got {0}")]
    NegativeExponent(f64),

    #[error("epoch {epoch} is outside 0..={t_max}")]
    EpochOutOfRange { epoch: usize, t_max: usize },

    #[error("degenerate representation: zero-norm vector in row {row}")]
    DegenerateVector { row: usize },

    #[error("logits contain NaN")]
    NanLogits,

    #[error("mixed weights must be non-negative")]
    NegativeWeight,

    #[error("training diverged: non-finite total loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("network has not been trained")]
    UntrainedNetwork,

    #[error("unknown encoder `{0}`")]
    UnknownEncoder(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl GlmcError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        GlmcError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GlmcError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        GlmcError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors that stem from user configuration rather than runtime failures.
    pub fn is_config_error(&self) -> bool {
        matches!(self, GlmcError::Config { .. })
    }
}
