use std::path::PathBuf;

/// Errors produced anywhere in the detector stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration value is out of range or internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// A numeric argument is outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),
    /// The API was called in a way it does not support.
    #[error("usage error: {0}")]
    Usage(String),
    /// The gradient-check harness itself could not run.
    #[error("harness error: {0}")]
    Harness(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    /// An input file is malformed.
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
