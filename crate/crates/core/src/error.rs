use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::File {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Broad failure class, used by the command line to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape(_) | Error::Argument(_) | Error::Config(_) | Error::MissingParam(_) => {
                ErrorKind::Validation
            }
            Error::NonFinite { .. } => ErrorKind::Numerical,
            Error::File { .. } | Error::Format(_) | Error::Io(_) => ErrorKind::Io,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numerical,
}
