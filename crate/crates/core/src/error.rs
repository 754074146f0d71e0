use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}:{line}: action `{action}` is not in the vocabulary", path.display())]
    UnknownAction {
        path: PathBuf,
        line: usize,
        action: String,
    },

    #[error("feature file has bad magic bytes")]
    BadMagic,

    #[error("feature file truncated: header declares {expected} frames but payload holds {found}")]
    Truncated { expected: usize, found: usize },

    #[error("feature file dimensions overflow: {0}")]
    DimensionOverflow(String),

    #[error("flat trace (max == min): no engagement signal")]
    FlatTrace,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward called with a cache from a different parameter version")]
    StaleCache,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{0}")]
    Data(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code used by the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) | Error::StaleCache => 3,
            _ => 2,
        }
    }
}
