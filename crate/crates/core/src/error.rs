use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A dimension did not match what the operation requires.
    #[error("{op}: {dim} mismatch (expected {expected}, got {got})")]
    Shape { op: &'static str, dim: &'static str, expected: usize, got: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape { op, dim, expected, got }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }
}

/// Errors from the binary decoders (weights files, PNM images).
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor name is not valid UTF-8")]
    BadUtf8,
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("dtype mismatch: file has {found}, expected {expected}")]
    DtypeMismatch { expected: &'static str, found: &'static str },
    #[error("tensor rank {0} exceeds 4")]
    RankTooLarge(u8),
    #[error("tensor element count overflows")]
    SizeOverflow,
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),
    #[error("image: {0}")]
    Image(String),
}
