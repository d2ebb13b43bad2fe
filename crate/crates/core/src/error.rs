use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NfqError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("parse error at {}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NfqError {
    pub fn config(msg: impl Into<String>) -> Self {
        NfqError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        NfqError::Shape(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        NfqError::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NfqError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = NfqError> = std::result::Result<T, E>;
