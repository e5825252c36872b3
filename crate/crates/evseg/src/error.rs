//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: event ({x}, {y}) outside sensor geometry {width}x{height}")]
    Bounds {
        line: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },

    #[error("events not sorted by timestamp at index {index}")]
    Ordering { index: usize },

    #[error("graph needs more than {k} nodes, got {n}")]
    InsufficientNodes { n: usize, k: usize },

    #[error("{0}")]
    Size(String),

    #[error("{op}: shape mismatch: {msg}")]
    ShapeMismatch { op: &'static str, msg: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("tape already consumed by backward; re-run forward first")]
    StaleTape,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint does not match model configuration: {0}")]
    ConfigMismatch(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("training aborted: {0}")]
    TrainAbort(String),

    #[error("synchronization error: {0}")]
    Sync(String),

    #[error("mask geometry {0}x{1} does not match {2}x{3}")]
    GeometryMismatch(u32, u32, u32, u32),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
