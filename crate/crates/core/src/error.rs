use thiserror::Error;

use crate::optimizer::AlphaSolveReport;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Numerical,
    NonConvergence,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input at line {line}{}: {reason}", column.as_ref().map(|c| format!(", column `{c}`")).unwrap_or_default())]
    MalformedInput {
        line: usize,
        column: Option<String>,
        reason: String,
    },

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("degenerate sample: all values are equal")]
    DegenerateSample,

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("value {value} lies outside the histogram support")]
    OutOfSupport { value: f64 },

    #[error("objective values of asset {asset} have zero mean; cannot normalize")]
    DegenerateObjective { asset: usize },

    #[error("matrix is singular")]
    SingularMatrix,

    #[error("matrix is ill-conditioned: condition estimate {condition:e} exceeds bound {bound:e}")]
    IllConditioned { condition: f64, bound: f64 },

    #[error("constraints are infeasible: expected returns are all equal but differ from the target")]
    InfeasibleConstraints,

    #[error("portfolio risk is zero; quality ratio undefined")]
    ZeroRisk,

    #[error("market entropy quadratic p_m' S p_m is zero")]
    ZeroEntropyQuadratic,

    #[error("self-consistent temperature solve did not converge after {} iterations (residual {:e})", report.iterations, report.residual)]
    NoConvergence { report: Box<AlphaSolveReport> },

    #[error("window ending at period {period}{}: {source}", date.as_ref().map(|d| format!(" ({d})")).unwrap_or_default())]
    Window {
        period: usize,
        date: Option<String>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn malformed(line: usize, column: Option<&str>, reason: impl Into<String>) -> Self {
        Error::MalformedInput {
            line,
            column: column.map(str::to_owned),
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MalformedInput { .. }
            | Error::InsufficientData { .. }
            | Error::InvalidSpec(_)
            | Error::DimensionMismatch(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorClass::Input,
            Error::NoConvergence { .. } => ErrorClass::NonConvergence,
            Error::Window { source, .. } => source.class(),
            _ => ErrorClass::Numerical,
        }
    }
}
