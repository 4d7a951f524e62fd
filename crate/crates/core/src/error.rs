use thiserror::Error;

/// Crate-wide error type. The CLI maps these onto process exit codes, so
/// the variant split mirrors the failure classes a caller can act on:
/// bad arguments/config, bad or missing data, and numeric breakdown.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Error {
        Error::ShapeMismatch { expected: expected.into(), got: got.into() }
    }
}
