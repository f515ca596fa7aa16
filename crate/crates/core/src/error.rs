use thiserror::Error;

/// Errors produced by the quantization library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("tensor extents must be positive, got {0:?}")]
    EmptyExtent(Vec<usize>),
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("invalid quantization scheme: {0}")]
    InvalidScheme(String),
    #[error("value {value} outside scheme range [{lo}, {hi}]")]
    OutOfRange { value: i32, lo: i32, hi: i32 },
    #[error("tensor is all zeros")]
    ZeroTensor,
    #[error("unsigned scheme without offset cannot represent negative input {0}")]
    NegativeInput(f32),
    #[error("grid must have at least 2 points, got {0}")]
    GridTooSmall(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("layer {layer}: missing activation calibration scales")]
    MissingCalibration { layer: usize },
    #[error("layer {layer}: integer accumulator overflow")]
    AccumulatorOverflow { layer: usize },
    #[error("empty calibration set")]
    EmptyCalibration,
}

pub type Result<T> = std::result::Result<T, Error>;
