//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the simulator core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("tensor contains a non-finite value")]
    NonFinite,

    #[error("batch size {0} too small: train-mode batch normalization needs at least 2 samples")]
    BatchTooSmall(usize),

    #[error("backward cache does not match this model state: {0}")]
    CacheMismatch(String),

    #[error("non-finite gradient encountered during an SGD step")]
    NonFiniteGradient,

    #[error("flat vector layout does not match the architecture: {0}")]
    LayoutMismatch(String),

    #[error("BN statistics layout mismatch: {0}")]
    BnLayoutMismatch(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("dataset is empty or too small: {0}")]
    EmptyDataset(String),

    #[error("bad IDX magic number {got:#010x}, expected {expected:#010x}")]
    BadIdxMagic { got: u32, expected: u32 },

    #[error("IDX file truncated: {0}")]
    IdxTruncated(String),

    #[error("IDX image count {images} does not match label count {labels}")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("Dirichlet partition re-draw budget exhausted after {0} attempts")]
    PartitionRedrawExhausted(usize),

    #[error("indicator source `{source_name}` shares a label space with the benign task `{benign}`; pass force=true to override")]
    IndicatorSourceNotDisjoint { source_name: String, benign: String },

    #[error("trigger coordinate ({row}, {col}) out of bounds for {height}x{width} image")]
    TriggerOutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("defense precondition violated: {0}")]
    DefensePrecondition(String),

    #[error("invalid experiment config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
