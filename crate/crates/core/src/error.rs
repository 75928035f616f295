use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar parameter lies outside its admissible domain (e.g. τ ≤ 0).
    #[error("parameter out of domain: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// A loss or gradient became non-finite during training.
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
