use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("no pose for rigid object {object} at timestamp {timestamp}")]
    MissingPose { object: u32, timestamp: usize },

    #[error("shape mismatch: expected {expected}, got {found}")]
    Shape { expected: String, found: String },

    #[error("invalid argument `{name}`: {message}")]
    InvalidArgument { name: String, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for config key `{key}`: {message}")]
    BadValue { key: String, message: String },

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("restorer `{restorer}` failed: {message}")]
    Restorer { restorer: String, message: String },

    #[error("{0}")]
    Other(String),
}

impl Error {
    /// Short machine-readable code used by the CLI diagnostic line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::MissingPose { .. } => "missing-pose",
            Error::Shape { .. } => "shape",
            Error::InvalidArgument { .. } => "invalid-argument",
            Error::UnknownKey(_) => "unknown-key",
            Error::BadValue { .. } => "bad-value",
            Error::Diverged { .. } => "diverged",
            Error::Restorer { .. } => "restorer",
            Error::Other(_) => "other",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name: name.into(),
            message: message.into(),
        }
    }
}
