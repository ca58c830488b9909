use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A config file could not be parsed (includes unknown keys).
    #[error("failed to parse config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },

    /// A line-delimited record could not be decoded.
    #[error("{path}:{line}: malformed record ({field}): {message}")]
    Record {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// An input violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// MOTA is undefined when there are no ground-truth observations.
    #[error("MOTA undefined: ground truth is empty but {predicted} predicted observations were given")]
    UndefinedMota { predicted: usize },

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss {value} in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("model checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors the CLI reports as configuration problems.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::ConfigParse { .. })
    }

    /// True for numerical aborts during training.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
