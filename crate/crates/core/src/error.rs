use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: non-finite value {value} at flat index {index}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("log of non-positive value {value} at flat index {index}")]
    NonPositiveLog { index: usize, value: f64 },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward: loss must be a scalar (1x1x1x1), got {0}")]
    NotScalar(String),

    #[error("backward: variable was not recorded on this tape")]
    ForeignVar,

    #[error("max_pool2d: spatial dims {h}x{w} must be even; resize the input")]
    OddPoolInput { h: usize, w: usize },

    #[error("input spatial dims {h}x{w} must be divisible by {multiple}")]
    IndivisibleDims { h: usize, w: usize, multiple: usize },

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: file is truncated")]
    Truncated,

    #[error("checkpoint: tensor `{name}` has shape {found}, config implies {expected}")]
    CheckpointShape {
        name: String,
        expected: String,
        found: String,
    },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("non-binary mask {}: pixel value {value} at index {index}", path.display())]
    NonBinaryMask { path: PathBuf, index: usize, value: f64 },

    #[error("content hash mismatch: manifest says {expected}, files hash to {found}")]
    HashMismatch { expected: String, found: String },

    #[error("malformed {kind} file {}: {msg}", path.display())]
    Format {
        kind: &'static str,
        path: PathBuf,
        msg: String,
    },

    #[error("class weight undefined: split has no foreground pixels")]
    NoForeground,

    #[error("soft targets missing for mode {0}")]
    MissingSoftTargets(String),

    #[error("soft targets are stale: generated from teacher {found}, plan expects {expected}")]
    StaleSoftTargets { expected: String, found: String },

    #[error("non-finite loss {loss} at iteration {iteration} (learning rate {learning_rate})")]
    NanLoss {
        iteration: usize,
        learning_rate: f64,
        loss: f64,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("unreachable foreground fraction: {0}")]
    UnreachableFraction(String),

    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }
}
