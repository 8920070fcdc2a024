use thiserror::Error;

/// Errors raised by the training engine and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension { context: &'static str, expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {family} strategy `{name}` (available: {available})")]
    UnknownStrategy { family: &'static str, name: String, available: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("corrupt tensor file: {0}")]
    Corrupt(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension { context, expected, actual });
    }
    Ok(())
}
