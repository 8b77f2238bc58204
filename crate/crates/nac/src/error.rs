use thiserror::Error;

/// Errors surfaced by tensor ops, wiring construction, and the layer.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An argument violates the operation's contract (k < 1, non-scalar loss, ...).
    #[error("argument error: {0}")]
    Argument(String),
    /// A cell or layer was configured inconsistently.
    #[error("configuration error: {0}")]
    Config(String),
    /// A numeric value left the finite range (NaN/Inf is an error state).
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
