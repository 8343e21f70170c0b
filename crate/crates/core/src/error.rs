use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or unknown identifier.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shapes inconsistent with the operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Dataset contents violate an invariant (empty, too short, misaligned).
    #[error("data error: {0}")]
    Data(String),

    /// A numerical routine failed (non-finite loss, eigen failure, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Checkpoint or dataset container could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
