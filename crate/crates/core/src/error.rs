use thiserror::Error;

/// Errors produced anywhere in the search pipeline.
#[derive(Debug, Error)]
pub enum KforgeError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("index {index} out of bounds for {what} of size {size}")]
    IndexOutOfBounds {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid categorical distribution: {0}")]
    InvalidDistribution(String),

    #[error("batch norm needs at least 2 elements per channel in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss tensor was not produced on this tape")]
    LossNotOnTape,

    #[error("sample record has no reward assigned")]
    MissingReward,

    #[error("architecture space overflow: {n}^{l} exceeds u64 range")]
    SpaceOverflow { n: usize, l: u32 },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("checkpoint error in {path}: {detail}")]
    Checkpoint { path: String, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, KforgeError>;

impl KforgeError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        KforgeError::Io {
            path: path.into(),
            source,
        }
    }
}
