use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("attention width {dim} is not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("grid with {cells} cells cannot hold {requested} regions")]
    GridTooSmall { cells: usize, requested: usize },
    #[error("unknown label {label} (vocabulary has {classes} classes)")]
    UnknownLabel { label: usize, classes: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("tensor file {path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("tensor file {path}: truncated payload")]
    Truncated { path: PathBuf },
    #[error("tensor file {path}: rank {rank} exceeds the format limit of 8")]
    RankTooLarge { path: PathBuf, rank: u32 },
    #[error("tensor file {path}: {reason}")]
    MalformedTensorFile { path: PathBuf, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training diverged at step {step}: total loss = {value}")]
    Diverged { step: usize, value: f64 },
    #[error("confusion matrix has no counted pixels")]
    EmptyConfusion,
    #[error("label {label} does not fit the 8-bit image palette")]
    LabelTooLarge { label: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
