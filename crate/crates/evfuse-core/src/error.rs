use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by parsing, validation, and the numeric operations.
///
/// `Invalid` covers domain violations (bad parameters, broken invariants),
/// `Parse` covers malformed input files and carries a location, and `Io`
/// wraps filesystem failures. The CLI maps `Io` to exit code 2 and
/// everything else to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at {location}: {message}")]
    Parse { location: Location, message: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where in an input a parse error occurred.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    /// 1-based line number in a text file.
    Line(usize),
    /// Byte offset in a binary file.
    Byte(usize),
    /// No finer position available (e.g. a JSON document as a whole).
    Document,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(n) => write!(f, "line {n}"),
            Location::Byte(n) => write!(f, "byte {n}"),
            Location::Document => write!(f, "document"),
        }
    }
}

impl Error {
    pub fn parse_line(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            location: Location::Line(line),
            message: message.into(),
        }
    }

    pub fn parse_byte(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            location: Location::Byte(offset),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }
}
