use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: missing column '{column}'")]
    MissingColumn { path: String, column: String },

    #[error("{path}, line {line}, column '{column}': cannot parse '{value}' as a number")]
    Parse { path: String, line: usize, column: String, value: String },

    #[error("{path}: duplicate coordinates on lines {first} and {second}")]
    DuplicateCoordinates { path: String, first: usize, second: usize },

    #[error("{0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Model(#[from] spconj::Error),
}

impl CliError {
    /// Stable identifier printed with every failure.
    pub fn class(&self) -> &'static str {
        use spconj::Error as E;
        match self {
            CliError::Config(_) => "config",
            CliError::MissingColumn { .. } => "missing_column",
            CliError::Parse { .. } => "parse",
            CliError::DuplicateCoordinates { .. } => "duplicate_coordinates",
            CliError::Csv(_) => "csv",
            CliError::Io(_) => "io",
            CliError::Model(e) => match e {
                E::DimensionMismatch(_) => "dimension_mismatch",
                E::DuplicateLocation { .. } => "duplicate_coordinates",
                E::InvalidParameter(_) => "invalid_parameter",
                E::InvalidInput(_) => "invalid_input",
                E::NotPositiveDefinite(_) => "not_positive_definite",
                E::RankDeficient(_) => "rank_deficient",
                E::NonPositiveScale(_) => "non_positive_scale",
                E::TooLarge { .. } => "too_large",
                E::NotConverged { .. } => "not_converged",
                E::Indefinite(_) => "indefinite",
                E::EmptyVariogram => "empty_variogram",
                E::FoldTooSmall { .. } => "fold_too_small",
                E::Io(_) => "io",
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}
