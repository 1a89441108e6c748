use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("data: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("runtime: {0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Runtime => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ErrorKind::Config => "E_CONFIG",
            ErrorKind::Data => "E_DATA",
            ErrorKind::Runtime => "E_RUNTIME",
        }
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => ErrorKind::Data,
            Error::Shape(_) | Error::Range(_) | Error::NonFinite { .. } | Error::Runtime(_) => {
                ErrorKind::Runtime
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}
