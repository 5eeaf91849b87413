use std::path::PathBuf;

use crate::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    #[error("invalid probability vector: {0}")]
    InvalidProbs(String),

    #[error("no allowed probability mass: every index is banned")]
    NoAllowedMass,

    #[error("no allowed tokens: the ban set covers every generatable token")]
    NoAllowedTokens,

    #[error("support violation at index {index}: q > 0 where p = 0")]
    SupportViolation { index: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("index set must be strictly increasing (at position {position})")]
    UnsortedIndexSet { position: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("the end-of-sequence token {0} cannot be banned")]
    EosBan(TokenId),

    #[error("invalid distribution: all entries are zero")]
    InvalidDistribution,

    #[error("empty sample")]
    EmptySample,

    #[error("pipeline stage {stage} failed: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("generation step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Strips `Stage` / `Step` wrappers and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Step { source, .. } => source.root(),
            other => other,
        }
    }

    /// True when the root cause is an infeasible constraint.
    pub fn is_infeasible(&self) -> bool {
        matches!(self.root(), Error::NoAllowedTokens | Error::NoAllowedMass)
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
