use std::io;

/// Errors raised anywhere in the codec toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("symbol {symbol} outside coder range [{lo}, {hi}]")]
    EncodeRange { symbol: i64, lo: i64, hi: i64 },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("bitstream was produced by a different model (expected checksum {expected:016x}, found {found:016x})")]
    WrongModel { expected: u64, found: u64 },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
