//! Crate error type and process exit-code mapping.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum EcarError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("validation: {0}")]
    Validation(String),
}

impl EcarError {
    pub fn usage(msg: impl Into<String>) -> Self {
        EcarError::Usage(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        EcarError::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EcarError::Io { path: path.into(), source }
    }

    /// Process exit code: 2 usage, 3 I/O, 4 validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            EcarError::Usage(_) => 2,
            EcarError::Io { .. } => 3,
            EcarError::Validation(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, EcarError>;
