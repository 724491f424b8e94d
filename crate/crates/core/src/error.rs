use std::path::PathBuf;

use robustdistill_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model spec does not compose: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("integrity error in {path}: {detail}")]
    Integrity { path: PathBuf, detail: String },
    #[error("checkpoint {path} was saved for spec {found:016x}, expected {expected:016x}")]
    SpecMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, value: f64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
