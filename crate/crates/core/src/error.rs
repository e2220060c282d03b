use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Caller-supplied value outside its documented domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// Model or run configuration inconsistent with the data it is applied to.
    #[error("config error: {0}")]
    Config(String),

    /// On-disk artifact violates its format.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    /// Training produced a non-finite loss.
    #[error("numeric divergence in fold {fold} ({stage}) at step {step}: loss = {loss}")]
    NumericDivergence {
        fold: usize,
        stage: &'static str,
        step: usize,
        loss: f64,
    },

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingArtifact(path.into());
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
