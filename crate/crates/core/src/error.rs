use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic {found:?}, expected \"NADA\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("unexpected record kind {found}, expected {expected}")]
    WrongKind { expected: u16, found: u16 },

    #[error("truncated {what}: expected {expected} bytes, got {actual}")]
    Truncated {
        what: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite value at payload index {0}")]
    NonFinite(usize),

    #[error("invalid attention stack: {0}")]
    InvalidStack(String),

    #[error("invalid embedding matrix: {0}")]
    InvalidEmbedding(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("unknown image {0:?}")]
    UnknownImage(String),

    #[error("label {label:?} has no token span in stack {image_id:?}")]
    MissingSpan { image_id: String, label: String },

    #[error("token {token} out of range for {tokens} tokens")]
    TokenOutOfRange { token: usize, tokens: usize },

    #[error("degenerate box ({x0}, {y0}, {x1}, {y1})")]
    DegenerateBox { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("zero-norm vector for {0:?}")]
    ZeroNorm(String),

    #[error("malformed record on line {line}: {message}")]
    Record { line: usize, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
