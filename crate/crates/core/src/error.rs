use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate softmax row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("index {index} out of range for {len} vertices")]
    Index { index: usize, len: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{path}: parse error at byte {offset}: {detail}")]
    Parse {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("{path}: topology error: {detail}")]
    Topology { path: PathBuf, detail: String },

    #[error("{path}: line {line}: schema error: {detail}")]
    Schema {
        path: PathBuf,
        line: u64,
        detail: String,
    },

    #[error("capacity error: {vertices} vertices exceed the configured maximum of {max}")]
    Capacity { vertices: usize, max: usize },

    #[error("sampler diverged at step {step}")]
    Divergence { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
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
}
