use std::path::PathBuf;

/// Errors produced by the beamforming toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A direction, position or measurement outside the domain of the geometry.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed argument to an operation (mismatched lengths, bad sizes, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Scenario configuration rejected during validation.
    #[error("{0}")]
    Config(#[from] crate::config::ConfigError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("csv error: {0}")]
    Csv(String),

    /// The pipeline watchdog fired; the run was aborted.
    #[error("pipeline aborted: {0}")]
    Aborted(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
