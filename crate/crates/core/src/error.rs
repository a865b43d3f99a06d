use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input norm {norm} exceeds the randomizer bound {bound}")]
    NormExceedsBound { norm: f64, bound: f64 },

    #[error("factorization is not balanced: column norm {norm} exceeds bound {bound}")]
    Unbalanced { norm: f64, bound: f64 },

    #[error("workload must be symmetric")]
    NotSymmetric,

    #[error("kernel has a non-zero diagonal and no diagonal correction was supplied")]
    MissingDiagonalCorrection,

    #[error("random projection failed verification after {retries} draws")]
    RetriesExhausted { retries: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unknown name: {0}")]
    UnknownName(String),

    #[error("trial {trial} failed: {message}")]
    TrialFailed { trial: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable snake_case tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NormExceedsBound { .. } => "norm_exceeds_bound",
            Error::Unbalanced { .. } => "unbalanced",
            Error::NotSymmetric => "not_symmetric",
            Error::MissingDiagonalCorrection => "missing_diagonal_correction",
            Error::RetriesExhausted { .. } => "retries_exhausted",
            Error::Parse(_) => "parse",
            Error::UnknownName(_) => "unknown_name",
            Error::TrialFailed { .. } => "trial_failed",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
