use std::io;
use std::path::Path;

use thiserror::Error;

/// Errors raised anywhere in the separation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("check failed: {0}")]
    Check(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Prefixes file-related messages with `path`.
    pub(crate) fn at(self, path: &Path) -> Self {
        let p = path.display();
        match self {
            Error::Io(e) | Error::Wav(hound::Error::IoError(e)) => Error::Io(io::Error::new(e.kind(), format!("{p}: {e}"))),
            Error::Checkpoint(m) => Error::Checkpoint(format!("{p}: {m}")),
            Error::Config(m) => Error::Config(format!("{p}: {m}")),
            other => other,
        }
    }

    /// Process exit code used by the command line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::Shape(_) => 2,
            Error::NonFinite(_) | Error::Check(_) => 3,
            Error::Checkpoint(_) | Error::Wav(_) | Error::Io(_) => 4,
        }
    }
}
