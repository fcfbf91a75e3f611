use thiserror::Error;

/// Errors raised by the solvers and estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error("index ({i}, {j}) lies outside the {region} region of a field with {nodes} nodes")]
    OutOfRegion {
        i: usize,
        j: usize,
        region: &'static str,
        nodes: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite {what} at path {path}, cell ({i}, {j})")]
    NonFinite {
        what: &'static str,
        path: usize,
        i: usize,
        j: usize,
    },

    #[error("regression failed at time index {k}, parameter {param}: {reason}")]
    Regression {
        k: usize,
        param: usize,
        reason: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("no contraction detected after {iterations} iterations (last gaps {last_gaps:?})")]
    NoContraction {
        iterations: usize,
        last_gaps: Vec<f64>,
    },

    #[error("nested budget exceeded: requested {requested} inner paths, cap {cap}")]
    BudgetExceeded { requested: usize, cap: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
