use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("annotation error in {file}{}: {msg}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Annotation {
        file: String,
        line: Option<usize>,
        msg: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss: first non-finite component is {component} (value {value})")]
    NonFinite { component: String, value: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
