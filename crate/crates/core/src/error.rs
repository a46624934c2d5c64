//! Crate-wide error type.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Matrix or sequence dimensions do not line up.
    DimensionMismatch(String),
    /// An input value is outside its documented domain.
    InvalidArgument(String),
    /// Input contains NaN or infinite entries.
    NonFinite(String),
    /// Attention denominator collapsed to zero (hard drop with an empty selected set).
    DegenerateNormalization { row: usize },
    /// File or parse failure in one of the CSV/JSON interfaces.
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite input: {msg}"),
            Error::DegenerateNormalization { row } => {
                write!(
                    f,
                    "degenerate normalization: denominator is zero at query row {row}"
                )
            }
            Error::Io(msg) => write!(f, "io: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
