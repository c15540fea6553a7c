use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("vocabulary mismatch: checkpoint has M={model_m}, N={model_n}; dataset has M={data_m}, N={data_n}")]
    VocabMismatch { model_m: usize, model_n: usize, data_m: usize, data_n: usize },
    #[error("non-finite loss at patient {patient} prefix {prefix} (logits in [{logit_min}, {logit_max}])")]
    NonFiniteLoss { patient: usize, prefix: usize, logit_min: f64, logit_max: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
