use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands disagree on an extent.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An axis index is outside the tensor rank.
    Axis { op: &'static str, axis: usize, rank: usize },
    /// An operation produced NaN or infinity.
    NonFinite { op: &'static str },
    /// A scalar argument is outside its valid range.
    OutOfRange { what: &'static str, detail: String },
    /// A configuration is internally inconsistent.
    Config(String),
    /// A control hook does not fit the site it was given to.
    Hook(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn range(what: &'static str, detail: impl Into<String>) -> Self {
        Error::OutOfRange {
            what,
            detail: detail.into(),
        }
    }

    /// Short machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Axis { .. } => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::OutOfRange { .. } => "range",
            Error::Config(_) => "config",
            Error::Hook(_) => "hook",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: dimension mismatch between {lhs:?} and {rhs:?}")
            }
            Error::Axis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} is invalid for a rank-{rank} tensor")
            }
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::OutOfRange { what, detail } => write!(f, "{what} out of range: {detail}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Hook(msg) => write!(f, "invalid control hook: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
