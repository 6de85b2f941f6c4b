use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error at {field}: {message}")]
    Parse { field: String, message: String },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
