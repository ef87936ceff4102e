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

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("target vocabulary size {requested} is below the minimum of {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },

    #[error("corpus exhausted after reaching vocabulary size {achieved} (target {target})")]
    CorpusTooSmall { achieved: usize, target: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("token id {id} at position {position} is out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("invalid vocabulary file: {0}")]
    VocabFormat(String),

    #[error("invalid choice set: {0}")]
    Choices(String),

    #[error("unknown template id {0} (expected 1..=26)")]
    UnknownTemplate(usize),

    #[error("invalid task spec: {0}")]
    TaskSpec(String),

    #[error("label {label:?} is not mapped by task {task:?}")]
    UnmappedLabel { task: String, label: String },

    #[error("document {doc_id:?} has no titles")]
    NoTitles { doc_id: String },

    #[error("distractor pool exhausted: need {needed}, only {available} eligible titles")]
    PoolExhausted { needed: usize, available: usize },

    #[error("unencodable example: {0}")]
    Unencodable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("every position in the batch is masked out of the loss")]
    EmptyLoss,

    #[error("non-finite gradient detected ({0})")]
    NonFiniteGradient(String),

    #[error("too many unencodable examples: {skipped} of {seen}")]
    UnencodableRate { skipped: usize, seen: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

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
}
