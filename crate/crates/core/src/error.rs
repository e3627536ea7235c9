use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {source_name} at row {row}: {message}")]
    Format {
        source_name: String,
        row: usize,
        message: String,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate likelihood: {0}")]
    DegenerateLikelihood(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("non-finite value at epoch {epoch}: {what}")]
    NonFinite { epoch: usize, what: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(source_name: impl Into<String>, row: usize, message: impl Into<String>) -> Self {
        Error::Format {
            source_name: source_name.into(),
            row,
            message: message.into(),
        }
    }
}
