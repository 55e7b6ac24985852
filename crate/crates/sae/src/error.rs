use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Design matrix is rank deficient.
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    /// A sampling variance D_i is zero or negative.
    #[error("non-positive sampling variance for area {area_id}")]
    NonPositiveSamplingVariance { area_id: String },

    /// A NaN or infinite value in the input data.
    #[error("non-finite value in field `{field}` for area {area_id}")]
    NonFinite {
        field: &'static str,
        area_id: String,
    },

    /// Areas disagree on covariate dimension.
    #[error("area {area_id} has {got} covariates, expected {expected}")]
    CovariateLengthMismatch {
        area_id: String,
        expected: usize,
        got: usize,
    },

    /// Empty dataset.
    #[error("dataset must contain at least one area")]
    EmptyDataset,

    /// The objective evaluated to NaN or +inf during maximization.
    #[error("objective is not finite at A = {a}")]
    NonFiniteObjective { a: f64 },

    /// Too few areas for the requested estimator.
    #[error("estimator requires more than {required} areas, got m = {m}")]
    TooFewAreas { m: usize, required: usize },

    /// The additional adjustment factor fails its validity conditions.
    #[error("invalid additional adjustment factor: {0}")]
    InvalidAdditionalFactor(String),

    /// Variance estimates do not match the dataset they are applied to.
    #[error("variance estimates do not match the dataset: {0}")]
    MethodDataMismatch(String),

    /// MSE form and variance estimator are incompatible.
    #[error("MSE form incompatible with supplied variance estimates: {0}")]
    FormEstimatorMismatch(String),

    /// Argument outside its mathematical domain.
    #[error("domain error: {0}")]
    DomainError(String),

    /// A weight function violates the admissibility hypotheses of the
    /// weight/factor duality.
    #[error("weight function hypothesis violated at A = {a}: {detail}")]
    HypothesisViolation { a: f64, detail: String },

    /// Numerical differentiation produced a non-finite value.
    #[error("non-finite derivative of log adjustment factor at A = {a}")]
    NonFiniteDerivative { a: f64 },

    /// An area index outside the dataset.
    #[error("area index {index} out of range for m = {m}")]
    AreaIndexOutOfRange { index: usize, m: usize },

    /// Invalid simulation configuration.
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),

    /// Too many failed replicates during a simulation run.
    #[error("{failed} of {total} replicates failed (limit 1%): first error: {first}")]
    ReplicateFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    /// A linear solve failed after validation; indicates an internal bug.
    #[error("internal linear algebra failure: {0}")]
    Internal(String),

    /// Malformed input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;
