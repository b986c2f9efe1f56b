use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeglError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown config key `{key}` at line {line}")]
    UnknownKey { key: String, line: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("normalization mismatch: expected {expected}, found {found}")]
    NormalizationMismatch { expected: String, found: String },
    #[error("empty logits")]
    EmptyLogits,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("features are not connected to logits in the differentiation graph")]
    DetachedGraph,
    #[error("empty list of annotated maps")]
    EmptyList,
    #[error("degenerate (all-zero) saliency map at index {0}")]
    DegenerateMap(usize),
    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },
    #[error("token sequence of length {len} exceeds maximum {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("missing image referenced by manifest: {0}")]
    MissingImage(PathBuf),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("duplicate record for image `{0}`")]
    DuplicateRecord(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("too few samples for stratification: {0}")]
    TooFewSamplesForStratification(String),
    #[error("confusion accumulator is empty")]
    EmptyAccumulator,
    #[error("candidate is empty")]
    EmptyCandidate,
    #[error("empty input sequence")]
    EmptyInput,
    #[error("missing corpus statistics")]
    MissingCorpusStats,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MeglError>;
