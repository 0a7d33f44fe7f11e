use thiserror::Error;

/// Errors raised by the inference procedures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("no treated units (N1 = 0)")]
    NoTreated,
    #[error("no control units (N0 = 0)")]
    NoControls,
    #[error("row {row}: treatment indicator must be 0 or 1, got {value}")]
    NonBinaryTreatment { row: usize, value: f64 },
    #[error("row {row}: outcome is not finite")]
    NonFiniteOutcome { row: usize },
    #[error("covariates must be present for every unit or for none")]
    PartialCovariates,
    #[error("row {row}: covariate must be strictly positive, got {value}")]
    NonPositiveCovariate { row: usize, value: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("budget must be at least 1")]
    BudgetZero,
    #[error("lower quantile {lower} exceeds upper quantile {upper}")]
    QuantileOrderViolation { lower: f64, upper: f64 },
    #[error("need at least {needed} residuals, got {got}")]
    TooFewResiduals { needed: usize, got: usize },
    #[error("quantile level {0} is outside (0, 1)")]
    UOutOfRange(f64),
    #[error("need at least {needed} controls, got {got}")]
    TooFewControls { needed: usize, got: usize },
    #[error("dataset carries no covariates")]
    MissingCovariates,
    #[error("fitted variance is not positive ({variance}) at covariate {x}")]
    NonPositiveVariance { x: f64, variance: f64 },
    #[error("significance level {0} is outside the admissible range")]
    InvalidLevel(f64),
    #[error("hypothesized value {0} is not finite")]
    NonFiniteNull(f64),
    #[error("grid is empty or ill-formed")]
    EmptyGrid,
    #[error("boundary refinement did not reach tolerance; bracket [{lo}, {hi}]")]
    NonConvergentRefinement { lo: f64, hi: f64 },
    #[error("interval [{lo}, {hi}] is malformed")]
    MalformedInterval { lo: f64, hi: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown data-generating process: {0}")]
    UnknownKind(String),
    #[error("method incompatible with input: {0}")]
    MethodIncompatible(String),
}

pub type Result<T> = std::result::Result<T, Error>;
