use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{what} must satisfy {constraint}, got {value}")]
    Domain {
        what: &'static str,
        constraint: &'static str,
        value: f64,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("no owner has a non-zero privacy parameter")]
    EmptyWinnerSet,

    #[error("auction selected no winners")]
    NoWinners,

    #[error("bid profile is empty")]
    EmptyProfile,

    #[error("bid {index} is invalid: {reason}")]
    InvalidBid { index: usize, reason: String },

    #[error("brute-force oracle supports at most {max} owners, got {n}")]
    OracleTooLarge { n: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty data: {0}")]
    EmptyData(&'static str),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: lagrangian is {value}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        value: f64,
    },

    #[error("model format: {0}")]
    Format(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_positive(what: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            what,
            constraint: "0 < x < inf",
            value,
        })
    }
}

pub(crate) fn ensure_non_negative(what: &'static str, value: f64) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            what,
            constraint: "0 <= x < inf",
            value,
        })
    }
}
