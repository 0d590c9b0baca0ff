use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("non-finite state at retained instant {instant}")]
    NonFinite { instant: usize },

    #[error("zero transition standard deviation at (k={k}, j={j})")]
    DegenerateSigma { k: usize, j: usize },

    #[error("component {0} has zero empirical variance")]
    ZeroVariance(usize),

    #[error("no smoothing parameter reaches the jump target; best eps={eps}, jump={jump}")]
    NoEpsilonFound { eps: f64, jump: f64 },

    #[error("normalizing denominator {0} is not positive")]
    NonPositiveDenominator(f64),

    #[error("normalization equation has no unique solution (equal information values)")]
    DegenerateEquation,

    #[error("no instant satisfies the concentration threshold")]
    EmptyAdmissibleSet,

    #[error("gram matrix of the reduced basis is singular")]
    SingularGram,

    #[error("constraint covariance is singular")]
    SingularCovariance,

    #[error("constraint iteration diverged at iteration {0}")]
    Diverged(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for failures caused by user input rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::DimensionMismatch { .. }
                | Error::ShapeMismatch(_)
                | Error::Io(_)
                | Error::Parse(_)
        )
    }

    /// Stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DegenerateData(_) => "DegenerateData",
            Error::RankDeficient(_) => "RankDeficient",
            Error::NonFinite { .. } => "NonFinite",
            Error::DegenerateSigma { .. } => "DegenerateSigma",
            Error::ZeroVariance(_) => "ZeroVariance",
            Error::NoEpsilonFound { .. } => "NoEpsilonFound",
            Error::NonPositiveDenominator(_) => "NonPositiveDenominator",
            Error::DegenerateEquation => "DegenerateEquation",
            Error::EmptyAdmissibleSet => "EmptyAdmissibleSet",
            Error::SingularGram => "SingularGram",
            Error::SingularCovariance => "SingularCovariance",
            Error::Diverged(_) => "Diverged",
            Error::Io(_) => "Io",
            Error::Parse(_) => "Parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
