use thiserror::Error;

/// Errors produced by the compressor toolkit.
#[derive(Debug, Error)]
pub enum SpaError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value {value} at index {index:?}")]
    NonFinite { index: Vec<usize>, value: f64 },

    #[error("{op}: empty key/value context")]
    EmptyContext { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown event mode `{0}` (expected paper-literal or frame-conditioned)")]
    UnknownMode(String),

    #[error("node {node} is not recorded on this tape")]
    UnrecordedNode { node: usize },

    #[error("node {node} is a constant and carries no gradient")]
    NotDifferentiable { node: usize },

    #[error("loss diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("tensor file: {0}")]
    Format(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = SpaError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> SpaError {
    SpaError::Shape {
        op,
        detail: detail.into(),
    }
}
