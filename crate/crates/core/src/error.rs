use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an op's signature.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid hyperparameter or structural configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid call argument.
    #[error("argument error: {0}")]
    Argument(String),

    /// A coordinate or index outside the valid range.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// Input data failed validation. `record` names the offending item.
    #[error("validation error in {record}: {field}: {detail}")]
    Validation {
        record: String,
        field: String,
        detail: String,
    },

    /// Malformed on-disk data.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },

    /// A finite-difference oracle hit a non-finite function value.
    #[error("gradient oracle failure: {0}")]
    OracleFailure(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }
}
