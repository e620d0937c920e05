use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the learner, from ingestion to checkpoint IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error at {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("ingestion error at {}: {detail}", path.display())]
    Ingest { path: PathBuf, detail: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("checkpoint error in `{field}`: {detail}")]
    Checkpoint { field: String, detail: String },

    #[error("training aborted at iteration {iteration}: non-finite loss ({breakdown})")]
    NonFiniteLoss { iteration: usize, breakdown: String },

    #[error("metrics error at line {line}: {detail}")]
    Metrics { line: usize, detail: String },

    #[error("plot error: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
