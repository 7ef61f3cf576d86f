use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("malformed weight container: {0}")]
    Container(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{name}` contains non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("token id {id} at position {position} is out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("sequence of {len} tokens exceeds max context {max_context}")]
    ContextOverflow { len: usize, max_context: usize },

    #[error("invalid hook: {0}")]
    InvalidHook(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("candidate `{0}` not found in prompt")]
    CandidateNotFound(String),

    #[error("indistinguishable candidates: `{0}` and `{1}` share first token id {2}")]
    IndistinguishableCandidates(String, String, u32),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("unknown category `{given}`; valid categories: {valid}")]
    UnknownCategory { given: String, valid: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
