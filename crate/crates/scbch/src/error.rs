use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not admit the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration, specification, or contract violation.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed dataset or checkpoint file.
    #[error("parse error: {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Non-finite values where finite arithmetic is required.
    #[error("numerical error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
