use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the pipeline
/// distinguishes at the CLI boundary (data/config problems vs numeric failures).
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image extents do not line up.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    Arg(String),

    /// A model or run configuration is internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A documented invariant was violated at runtime.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training failed (NaN gradients, diverging loss).
    #[error("training error: {0}")]
    Train(String),

    /// A numeric computation failed to produce a usable result.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Input data is malformed or missing.
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Arg(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn train(msg: impl Into<String>) -> Self {
        Error::Train(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
