use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("refusing to overwrite existing output {0} (pass --force)")]
    OutputExists(PathBuf),

    #[error("missing input {0}")]
    MissingInput(PathBuf),

    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, dataset {dataset}")]
    VocabMismatch { checkpoint: String, dataset: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Invalid(_) => "invalid_argument",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::NonFinite(_) => "non_finite",
            Error::UnknownMethod(_) => "unknown_method",
            Error::Config(_) => "config",
            Error::OutputExists(_) => "output_exists",
            Error::MissingInput(_) => "missing_input",
            Error::VocabMismatch { .. } => "vocab_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
