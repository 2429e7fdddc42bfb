//! Error types shared across the crate.

use thiserror::Error;

/// Errors from tensor construction and graph operations.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("expected a scalar tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("matrix is singular or ill-conditioned (cond estimate {cond:.3e})")]
    IllConditioned { cond: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// Errors from the JPEG codec. Each unsupported stream class gets its own
/// variant so rejection is always explicit.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum JpegError {
    #[error("not a JPEG stream (missing SOI)")]
    NotJpeg,
    #[error("truncated stream: {0}")]
    Truncated(&'static str),
    #[error("progressive JPEG (SOF2) is not supported")]
    ProgressiveUnsupported,
    #[error("arithmetic-coded JPEG is not supported")]
    ArithmeticUnsupported,
    #[error("hierarchical/lossless JPEG (SOF marker 0x{0:02X}) is not supported")]
    SofUnsupported(u8),
    #[error("sample precision {0} is not supported (8-bit only)")]
    PrecisionUnsupported(u8),
    #[error("chroma subsampling is not supported (4:4:4 only)")]
    SubsamplingUnsupported,
    #[error("expected 3 components, found {0}")]
    ComponentCountUnsupported(u8),
    #[error("image dimensions {0}x{1} are not multiples of 8")]
    DimensionsNotMultipleOf8(u16, u16),
    #[error("malformed stream: {0}")]
    Malformed(String),
    #[error("quality factor {0} outside 1..=100")]
    QualityOutOfRange(u32),
    #[error("coefficient {value} at plane {plane} index {index} outside encodable baseline range")]
    CoefficientOutOfRange { plane: usize, index: usize, value: i32 },
    #[error("no Huffman table with class {class} id {id}")]
    MissingHuffmanTable { class: u8, id: u8 },
    #[error("no quantization table with id {0}")]
    MissingQuantTable(u8),
}

/// Errors from model assembly, training and evaluation.
#[derive(Error, Debug)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Jpeg(#[from] JpegError),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("{0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("model file is invalid: {0}")]
    BadModelFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Data(String),
}
