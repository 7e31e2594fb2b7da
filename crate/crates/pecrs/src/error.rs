//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised while loading or constructing corpora and tokenizers.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: malformed JSON: {msg}")]
    MalformedLine { path: String, line: usize, msg: String },
    #[error("{path}:{line}: unknown speaker label '{label}'")]
    UnknownSpeaker { path: String, line: usize, label: String },
    #[error("{path}:{line}: item id {id} does not resolve in the item bank")]
    UnresolvedItem { path: String, line: usize, id: u32 },
    #[error("{path}:{line}: duplicate item id {id}")]
    DuplicateItem { path: String, line: usize, id: u32 },
    #[error("{path}:{line}: utterance text is empty")]
    EmptyUtterance { path: String, line: usize },
    #[error("cannot build a tokenizer from an empty corpus")]
    EmptyCorpus,
    #[error("vocab_size {given} is too small; need at least {needed}")]
    VocabTooSmall { given: usize, needed: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DataError::Io { path: path.into(), source }
    }
}

/// Errors raised by the model, training loop, or inference pipeline.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("stream length {len} exceeds max_positions {max}")]
    StreamTooLong { len: usize, max: usize },
    #[error("attention mask row {row} allows no keys")]
    EmptyMaskRow { row: usize },
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("empty token sequence passed to {0}")]
    EmptyInput(&'static str),
    #[error("non-finite {what} at step {step} (recall={recall}, rerank={rerank}, gen={gen})")]
    NonFiniteLoss { what: &'static str, step: usize, recall: f64, rerank: f64, gen: f64 },
    #[error("cannot sample {m} negatives from {available} non-positive items")]
    NotEnoughNegatives { m: usize, available: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        ModelError::Io { path: path.into(), source }
    }

    pub fn checkpoint(path: impl Into<String>, msg: impl Into<String>) -> Self {
        ModelError::Checkpoint { path: path.into(), msg: msg.into() }
    }
}
