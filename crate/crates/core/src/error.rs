use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Several validation failures collected in one pass.
    #[error("{} validation error(s): {}", .0.len(), .0.join("; "))]
    Validation(Vec<String>),

    /// Blue-detuned operation past the parametric-oscillation threshold.
    #[error("unstable operating point: {0}")]
    Instability(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("slope sign inconsistent with {expected} detuning (slope = {slope:e})")]
    SignMismatch { expected: &'static str, slope: f64 },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("sampling too coarse: {0}")]
    Sampling(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::FitFailure(_) | Error::Io(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
