use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AsdError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("masked softmax row has no unmasked entries")]
    EmptyMaskRow,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("stream alignment failed: {0}")]
    Alignment(String),

    #[error("session error: {0}")]
    Session(String),

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic {
        what: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported {what} version {version}")]
    Version { what: &'static str, version: u32 },

    #[error("truncated {0}")]
    Truncated(&'static str),

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),

    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),

    #[error("tensor {name} has dims {found:?}, config requires {expected:?}")]
    TensorDims {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl AsdError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AsdError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AsdError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = AsdError> = std::result::Result<T, E>;
