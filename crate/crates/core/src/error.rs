use thiserror::Error;

/// Errors raised by the spatial regression toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("duplicate locations at indices {first} and {second}")]
    DuplicateLocation { first: usize, second: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("design is rank deficient: {0}")]
    RankDeficient(String),

    #[error("posterior scale b* = {0} is not positive")]
    NonPositiveScale(f64),

    #[error("problem size {n} exceeds the dense limit of {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("conjugate gradient did not converge: {iterations} iterations, relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("operator is not positive definite (curvature {0:e})")]
    Indefinite(f64),

    #[error("empirical variogram has no populated bins")]
    EmptyVariogram,

    #[error("fold {fold} is too small to fit: {rows} training rows for {p} predictors")]
    FoldTooSmall { fold: usize, rows: usize, p: usize },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
