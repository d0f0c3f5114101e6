use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DsamError>;

#[derive(Debug, Error)]
pub enum DsamError {
    #[error("shape mismatch in {context}: {dim} expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("expected a rank-{expected} tensor in {context}, got rank {actual}")]
    Rank {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("downsampling {from:?} with {strategy} cannot produce spatial size {target:?}, got {produced:?}")]
    Downsample {
        strategy: String,
        from: (usize, usize),
        target: (usize, usize),
        produced: (usize, usize),
    },

    #[error("expected {expected} taps, got {actual}")]
    TapCount { expected: usize, actual: usize },

    #[error("aggregation node {index}: {source}")]
    Node {
        index: usize,
        #[source]
        source: Box<DsamError>,
    },

    #[error("module spec incompatible with backbone taps: expected channels {expected:?}, backbone provides {actual:?}")]
    IncompatibleTaps {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("at least 2 source domains are required, got {0}")]
    TooFewSources(usize),

    #[error("unknown domain {0}")]
    UnknownDomain(String),

    #[error("non-finite loss at step {step} (lr {lr}, per-domain losses {domain_losses:?})")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        domain_losses: Vec<f64>,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("feature dump: {0}")]
    FeatureDump(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),
}

impl DsamError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DsamError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        DsamError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user input rather than a runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            DsamError::Config { .. }
                | DsamError::InvalidSpec(_)
                | DsamError::UnknownDomain(_)
                | DsamError::TooFewSources(_)
                | DsamError::IncompatibleTaps { .. }
        )
    }
}
