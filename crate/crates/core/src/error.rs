use thiserror::Error;

/// Error type shared by the whole toolkit.
#[derive(Debug, Error)]
pub enum McError {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("no injection detected: {0}")]
    NoInjection(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, McError>;
