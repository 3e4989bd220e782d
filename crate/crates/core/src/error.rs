use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An elementwise op received an input outside its domain.
    Domain { op: &'static str, index: usize },
    /// A reduction or statistic was asked of an empty input.
    Empty(&'static str),
    /// `backward` was called on a tensor with more than one element.
    NonScalarLoss(Vec<usize>),
    /// Correlation is undefined (too few points or a constant vector).
    UndefinedCorrelation(&'static str),
    /// Least-squares design matrix is rank deficient.
    RankDeficient,
    /// Two slices that must have equal length did not.
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    /// A parameter or argument is outside its valid range.
    InvalidArgument(String),
    /// Record-level data problem (missing judges, width mismatch, ...).
    Data(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::Domain { op, index } => write!(f, "{op}: input out of domain at index {index}"),
            Error::Empty(what) => write!(f, "{what}: empty input"),
            Error::NonScalarLoss(shape) => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::UndefinedCorrelation(why) => write!(f, "correlation undefined: {why}"),
            Error::RankDeficient => f.write_str("design matrix is rank deficient"),
            Error::LengthMismatch { what, left, right } => {
                write!(f, "{what}: length mismatch ({left} vs {right})")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
