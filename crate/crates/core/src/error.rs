use thiserror::Error;

/// Errors raised by estimation, optimization and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("input contains no observations")]
    EmptyInput,
    #[error("at least {required} observations are required, got {got}")]
    TooFewRows { required: usize, got: usize },
    #[error("missing or non-finite value at row {row}, column {column}")]
    MissingValue { row: usize, column: usize },
    #[error("estimand evaluates to a non-finite value at row {row}")]
    NonFiniteEvaluation { row: usize },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid weight box: need 0 < a <= b <= 1, got a = {a}, b = {b}")]
    InvalidBox { a: f64, b: f64 },
    #[error("denominator of the weighted ratio vanishes or changes sign over the weight box")]
    ZeroDenominator,
    #[error("support of size {0} is too large for vertex enumeration (max 20)")]
    SupportTooLarge(usize),
    #[error("weight at cell {index} is not a vertex of the box")]
    NotAVertex { index: usize },
    #[error("significance level must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("no draws to take a quantile of")]
    EmptyDraws,
    #[error("{failed} of {total} bootstrap resamples had a vanishing denominator")]
    TooManyFailedResamples { failed: usize, total: usize },
    #[error("constraint infeasible by construction: {0}")]
    InfeasibleByConstruction(String),
    #[error("no weight vector in the box satisfies the relaxed constraints")]
    InfeasibleConstraints,
    #[error("constrained solver did not converge (best KKT residual {residual:e})")]
    NonConvergence { residual: f64 },
    #[error("parameter polytope of the selection model is empty")]
    InfeasiblePolytope,
    #[error("link inverse undefined at weight bound {0}")]
    BoundaryLinkError(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
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

pub type Result<T> = std::result::Result<T, Error>;
