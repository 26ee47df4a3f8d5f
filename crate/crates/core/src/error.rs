//! Error type shared across the core.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    Shape(String),
    /// Precondition violation: bad axis, out-of-range id, empty batch, ...
    Usage(String),
    /// Malformed multimodal sequence; `position` is the first violating slot.
    Parse { position: usize, message: String },
    /// NaN or Inf surfaced where the contract forbids it.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Parse { position, message } => {
                write!(f, "parse error at slot {position}: {message}")
            }
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

macro_rules! usage_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Usage(alloc::format!($($arg)*))
    };
}

pub(crate) use shape_err;
pub(crate) use usage_err;
