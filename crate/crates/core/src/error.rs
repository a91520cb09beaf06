use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("degenerate embedding: row {0} has zero norm")]
    DegenerateEmbedding(usize),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("score singular at t=0")]
    SingularScore,

    #[error("numerical overflow in denoiser")]
    NumericalOverflow,

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),

    #[error("empty mask: no positions to score")]
    EmptyMask,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("degenerate frequency distribution")]
    DegenerateFrequencies,

    #[error("trace lacks {0}")]
    TraceMissing(&'static str),

    #[error("unsupported trace version {0}")]
    UnsupportedTraceVersion(u64),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("logprob mismatch at sample {sample}, position {position}")]
    LogprobMismatch { sample: usize, position: usize },

    #[error("step {step}: {source}")]
    AtStep { step: usize, source: Box<Error> },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Error {
        Error::Invalid(msg.into())
    }
}
