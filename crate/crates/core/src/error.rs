use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: read failed at byte offset {offset}: {source}")]
    Read {
        path: PathBuf,
        offset: u64,
        #[source]
        source: io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("undefined density: {0}")]
    UndefinedDensity(&'static str),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("infeasible injection: {0}")]
    Infeasible(String),

    #[error("AUC undefined: {0}")]
    AucUndefined(&'static str),

    #[error("worker failed: {0}")]
    Worker(String),

    #[error("{0}")]
    Input(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
