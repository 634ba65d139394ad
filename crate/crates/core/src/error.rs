use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("integration produced a non-finite derivative for {component}")]
    Integration { component: &'static str },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Validation { path: PathBuf, message: String },

    #[error("trace exhausted at minute {minute}")]
    TraceExhausted { minute: f64 },

    #[error("empty buffer: {0}")]
    EmptyBuffer(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite activation in {layer}")]
    Numeric { layer: &'static str },

    #[error("ground-truth component {component} at step {step} is too close to zero ({value})")]
    DivisionGuard {
        step: usize,
        component: usize,
        value: f64,
    },

    #[error("action out of bounds: component {component} = {value} not in [{lo}, {hi}]")]
    ActionOutOfBounds {
        component: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
