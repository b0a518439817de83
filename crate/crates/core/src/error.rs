use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward was already run on this graph; record a new forward pass first")]
    BackwardAlreadyRun,

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("{what} {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid prompt directive `{0}`")]
    MalformedDirective(String),

    #[error("unknown adapter `{name}`; available: [{}]", available.join(", "))]
    UnknownAdapter { name: String, available: Vec<String> },

    #[error("dataset error at {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),

    #[error("truncated checkpoint payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("checkpoint tensor `{0}` overlaps its predecessor in the payload")]
    OverlappingOffsets(String),

    #[error("model state: {0}")]
    State(String),

    #[error("config: {0}")]
    Config(String),

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
