use thiserror::Error;

/// Unified error type for the toolkit.
///
/// The split matters to callers: `Parse` and `Invalid` mean the input was
/// wrong (CLI exit code 2), `Degenerate` and `Numeric` mean the inputs were
/// accepted but the model or solver could not deliver a trustworthy result
/// (CLI exit code 3).
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input text. `line` is 1-based; 0 means the input as a whole.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A value or combination of values violates a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The parameter point is one the model cannot represent (rate
    /// collisions, critical load, clustered spectra).
    #[error("degenerate model: {0}")]
    Degenerate(String),

    /// A solver ran but failed one of its numeric quality gates.
    #[error("numeric quality: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }
}
