use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("ring parameter mismatch: operands built for different rings")]
    ParamsMismatch,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("encoding overflow: |{value}| * 2^{scale_bits} exceeds t/2 = {half_t}")]
    EncodeOverflow {
        value: f64,
        scale_bits: u32,
        half_t: u64,
    },

    #[error("noise budget exhausted: bound {bound} against ceiling q/(2t) = {ceiling}")]
    NoiseBudgetExhausted { bound: u64, ceiling: u64 },

    #[error("malformed serialized data: {0}")]
    Malformed(String),

    #[error("unsupported format version {0}")]
    BadVersion(u8),

    #[error("sensitivity score at index {index} is not finite and non-negative")]
    BadScore { index: usize },

    #[error("monotonicity violated at index {index}: score {score} > {bound}")]
    MonotonicityViolation {
        index: usize,
        score: f64,
        bound: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("estimated memory {estimated_bytes} bytes exceeds cap {cap_bytes} bytes")]
    MemoryGuard { estimated_bytes: u64, cap_bytes: u64 },

    #[error("i/o failure: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
