use thiserror::Error;

/// Errors raised by model construction, control evaluation and integration.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("slip must be nonnegative, got {0}")]
    NegativeSlip(f64),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("element {0} has zero slip-rate; the slip branch is undefined there (use the stick branch)")]
    BranchViolation(usize),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("{0} is singular or rank deficient")]
    Singular(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("integration failed at t = {t:.6e} s: {reason}")]
    Integration { t: f64, reason: String },

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { what, expected, got })
    }
}
