//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at line {line}: {message}")]
    MalformedJson { line: usize, message: String },
    #[error("length mismatch at line {line}: {tokens} tokens vs {slots} slots")]
    LengthMismatch {
        line: usize,
        tokens: usize,
        slots: usize,
    },
    #[error("ill-formed BIO at line {line}: {message}")]
    IllFormedBio { line: usize, message: String },
    #[error("empty utterance at line {line}")]
    EmptyUtterance { line: usize },
    #[error("duplicate utterance id `{id}` at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("degenerate split: ratio {ratio} leaves P2 empty for {n_intents} intents")]
    DegenerateSplit { ratio: f64, n_intents: usize },
    #[error("corpus needs at least two intents, found {found}")]
    TooFewIntents { found: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_len {max_len} (position 0 is reserved)")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("position {pos} out of range for {len} tokens")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("span ({start}, {end}) out of range for length {len}")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),
    #[error("invalid cut k={k} for span ({i}, {j})")]
    InvalidCut { i: usize, j: usize, k: usize },
    #[error("impact matrix: {0}")]
    ImpactFormat(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("unknown utterance id `{0}`")]
    UnknownUtterance(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
