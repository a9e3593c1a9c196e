use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("transition matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("transition matrix is empty")]
    Empty,

    #[error("entry p({col}|{row}) = {value} is outside [0, 1]")]
    InvalidEntry { row: usize, col: usize, value: f64 },

    #[error("row {row} sums to {sum}, expected 1 within 1e-12")]
    NotStochastic { row: usize, sum: f64 },

    #[error("chain is not irreducible: state {unreachable} is not mutually reachable with state 0")]
    NotIrreducible { unreachable: usize },

    #[error("chain is periodic with period {period}")]
    Periodic { period: usize },

    #[error("linear solve failed for {what}: {detail}")]
    SolverFailure { what: String, detail: String },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: String, expected: usize, got: usize },

    #[error("feature matrix is rank deficient: smallest singular value {smallest:e} vs largest {largest:e}")]
    RankDeficient { smallest: f64, largest: f64 },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error(
        "feature condition violated: lambda_M = {lambda_m} is not below {threshold}; \
         rescale features by a factor below {suggested_scale}"
    )]
    AssumptionViolated {
        lambda_m: f64,
        threshold: f64,
        suggested_scale: f64,
    },

    #[error("invalid step-size schedule: {0}")]
    InvalidSchedule(String),

    #[error("step index {index} is beyond the schedule table of length {len}")]
    ScheduleOutOfRange { index: usize, len: usize },

    #[error("invalid bound query: {0}")]
    InvalidQuery(String),

    #[error("n0 = {n0} is infeasible: alpha + a(n0) c1 = {value} >= 1")]
    N0Infeasible { n0: usize, value: f64 },

    #[error("tail series does not converge: {0}")]
    SeriesDivergence(String),

    #[error("non-finite iterate at step {step}{}", trajectory.map(|t| format!(" of trajectory {t}")).unwrap_or_default())]
    NonFinite {
        step: usize,
        trajectory: Option<usize>,
    },

    #[error("noise decomposition residual {residual:e} at step {step} exceeds 1e-10")]
    DecompositionMismatch { step: usize, residual: f64 },

    #[error("insufficient tail data: {0}")]
    InsufficientTailData(String),

    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn dims(what: &str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what: what.to_string(),
            expected,
            got,
        }
    }

    pub(crate) fn solver(what: &str, detail: impl Into<String>) -> Self {
        Error::SolverFailure {
            what: what.to_string(),
            detail: detail.into(),
        }
    }

    /// True for errors that come out of numerical work rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SolverFailure { .. }
                | Error::NonFinite { .. }
                | Error::DecompositionMismatch { .. }
                | Error::SeriesDivergence(_)
                | Error::InsufficientTailData(_)
        )
    }
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
