use thiserror::Error;

/// Errors raised anywhere in the adaptation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: division by exact zero at element {index}")]
    DivisionByZero { op: &'static str, index: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: index {index} out of bounds for length {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("instance masks {a} and {b} overlap at pixel {pixel}")]
    OverlappingMasks { a: u16, b: u16, pixel: usize },
    #[error("parameter structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
