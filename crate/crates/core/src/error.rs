use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("degenerate spectrum (eigenvalue range {0:e})")]
    DegenerateSpectrum(f64),
    #[error("invalid similarity matrix: {0}")]
    InvalidSimilarity(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures caused by the input data rather than arithmetic.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::NumericalFailure(_) | Error::DegenerateSpectrum(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
