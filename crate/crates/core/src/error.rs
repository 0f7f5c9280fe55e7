use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("insufficient points: requested {requested}, have {available}")]
    InsufficientPoints { requested: usize, available: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("nondifferentiable configuration: {0}")]
    NonDifferentiable(String),

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("backward: {0}")]
    Backward(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {msg} (at {position})")]
    Parse { path: String, position: String, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
