use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    /// An `error` response from a bridge peer; the session stays usable.
    #[error("bridge reported: {0}")]
    Remote(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("i/o error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn io_err(context: impl Into<String>, source: std::io::Error) -> Error {
    Error::Io {
        context: context.into(),
        source,
    }
}

pub(crate) fn path_err(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
    Error::Path {
        path: path.into(),
        source,
    }
}
