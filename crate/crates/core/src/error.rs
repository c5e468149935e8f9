use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, out-of-range steps, malformed arguments.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A computation produced NaN or infinity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Artifacts that do not fit together (unknown targets, architecture mismatch).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Malformed or truncated files, version mismatches.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration values outside their allowed range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training diverged.
    #[error("training error: {0}")]
    Training(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
