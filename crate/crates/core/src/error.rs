use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty document")]
    EmptyDocument,
    #[error("invalid window: {0}")]
    InvalidWindow(usize),
    #[error("insufficient reference data: {0} passage(s), need at least 2")]
    InsufficientReference(usize),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("passage too short for grounding: {0} token(s), need at least 3")]
    PassageTooShort(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient at index {0}")]
    NonFiniteGradient(usize),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("context exceeded: {len} tokens, limit {limit}")]
    ContextExceeded { len: usize, limit: usize },
    #[error("backend `{backend}` lacks capability `{capability}`")]
    MissingCapability { backend: String, capability: String },
    #[error("backend error{}: {message}", if *.retryable { " (retryable)" } else { "" })]
    Backend { message: String, retryable: bool },
    #[error("per-token logprobs unavailable from backend: {0}")]
    LogprobsUnavailable(String),
    #[error("no scripted entry for key {0}")]
    MissingScript(String),
    #[error("chain generation failed for {0}")]
    ChainGenerationFailed(String),
    #[error("passages not flagged to begin with (mean before {before} <= threshold {threshold})")]
    NotFlagged { before: f64, threshold: f64 },
    #[error("training diverged at step {step} (item {item_id})")]
    Diverged {
        step: usize,
        item_id: String,
        report: Box<crate::gatedopt::TrainingReport>,
    },
    #[error("template error: {0}")]
    Template(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("stage ordering: {0}")]
    StageOrder(String),
    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn backend(message: impl Into<String>, retryable: bool) -> Self {
        Error::Backend {
            message: message.into(),
            retryable,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            Error::Backend {
                retryable: true,
                ..
            }
        )
    }
}
