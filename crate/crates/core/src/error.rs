use std::path::PathBuf;

/// Errors produced by the core library, grouped by category so callers can
/// map them to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or parameter dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Problem with dataset contents (labels, files, pixels).
    #[error("data error: {0}")]
    Data(String),

    /// Parse failure in a text input, with the offending line number.
    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Malformed or truncated binary format.
    #[error("format error: {0}")]
    Format(String),

    /// Operation called in an invalid engine state (e.g. backward twice).
    #[error("state error: {0}")]
    State(String),

    /// Input that makes the requested quantity undefined (e.g. no scored pixels).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Training aborted; carries the offending batch diagnostic.
    #[error("training error: {0}")]
    Train(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
