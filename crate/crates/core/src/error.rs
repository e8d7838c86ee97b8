use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the fusion engine.
///
/// Variants fall into two buckets that the command line maps onto exit codes:
/// I/O and data problems (everything here) versus usage problems, which are
/// caught by argument parsing before the engine runs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {row} has zero norm ({norm:e}); cosine similarity is undefined")]
    ZeroNorm { row: usize, norm: f64 },

    #[error("checksum mismatch for {path}: manifest says {expected}, payload hashes to {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("empty subset")]
    EmptySubset,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
