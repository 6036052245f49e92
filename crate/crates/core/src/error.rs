use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("non-finite entry at vector {vector}, dimension {dim}")]
    NonFinite { vector: usize, dim: usize },

    #[error("degenerate constellation: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("CCCP invariant violated: {0}")]
    Invariant(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("all {restarts} restarts failed: {details}")]
    AllRestartsFailed { restarts: usize, details: String },

    #[error("malformed input: {0}")]
    Parse(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
