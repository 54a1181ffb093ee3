use thiserror::Error;

/// Errors produced by the model, simulator, kernels and estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rates must satisfy 0 < beta0 < beta1 < beta2, got ({0}, {1}, {2})")]
    InvalidBetas(f64, f64, f64),

    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("f_ij requires i != j (got i = j = {0})")]
    SameVertex(usize),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("process must have at least one column")]
    EmptyProcess,

    #[error("horizon must be finite and nonnegative, got {0}")]
    NegativeHorizon(f64),

    #[error("coupled processes must share the same rates")]
    MismatchedBetas,

    #[error("time {0} was not sampled")]
    UnsampledTime(f64),

    #[error("kernel violates the support condition at {state:?}: {detail}")]
    KernelSupport { state: Vec<i64>, detail: String },

    #[error("enumeration budget of {budget} exceeded")]
    BudgetExceeded { budget: u64 },

    #[error("graph has {edges} edges, pattern enumeration supports at most {limit}")]
    TooManyEdges { edges: usize, limit: usize },

    #[error("truncated state space has {states} states, limit is {limit}")]
    StateBudget { states: usize, limit: usize },

    #[error("tail fit needs at least 3 usable points, found {0}")]
    DegenerateFit(usize),

    #[error("midpoint condition violated: beta1 - (beta0 + beta2)/2 = {0}")]
    NotMidpoint(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
