use thiserror::Error;

use crate::backend::BranchKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty aggregation set")]
    EmptyAggregation,

    #[error("NaN in score vector")]
    NotANumber,

    #[error("empty support: every logit is masked")]
    EmptySupport,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("candidate `{candidate}` references token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange {
        candidate: String,
        token: u32,
        vocab: usize,
    },

    #[error("invalid candidate set: {0}")]
    InvalidCandidates(String),

    #[error("missing logit row for layer {0}")]
    MissingLayer(usize),

    #[error("branch not recorded: step {step}, branch {branch}")]
    BranchNotRecorded { step: usize, branch: BranchKind },

    #[error("layer not recorded: step {step}, layer {layer}")]
    LayerNotRecorded { step: usize, layer: usize },

    #[error("invalid decode state: {0}")]
    InvalidState(String),

    #[error("trace parse error at line {line}: {message}")]
    TraceParse { line: usize, message: String },

    #[error("trace integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
