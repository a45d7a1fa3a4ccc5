use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic bytes {found:?}, expected \"AGQT\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported store format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload while reading {context}")]
    Truncated { context: &'static str },

    #[error("trailing bytes after the last tensor ({0} bytes)")]
    TrailingBytes(usize),

    #[error("tensor of {rows}x{cols} exceeds the 2^31 element cap")]
    DimensionOverflow { rows: u64, cols: u64 },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("invalid tensor name: {0}")]
    InvalidName(String),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("data length {actual} does not match shape (expected {expected})")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{0}: empty tensor")]
    EmptyTensor(&'static str),

    #[error("invalid index list: {0}")]
    InvalidIndices(String),

    #[error("unsupported bit width {0}")]
    InvalidBits(u32),

    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),

    #[error("expected {expected} quantized tensor, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("code {code} outside [{lo}, {hi}]")]
    CodeOutOfRange { code: i64, lo: i64, hi: i64 },

    #[error("inner dimension {inner} exceeds the 32-bit accumulator limit {limit}")]
    AccumulatorOverflow { inner: usize, limit: usize },

    #[error("lane accumulator budget of {0} additions exceeded")]
    BudgetExceeded(u32),

    #[error("invalid attention map: {0}")]
    InvalidMap(String),

    #[error("invalid prune schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown kernel {0:?}")]
    UnknownKernel(String),
}
