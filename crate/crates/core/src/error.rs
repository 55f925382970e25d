//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {detail}")]
    InvalidParameter { name: &'static str, detail: String },

    #[error("transition row (s={state}, a={action}) sums to {sum}, expected 1 within {tol}")]
    NotStochastic {
        state: usize,
        action: usize,
        sum: f64,
        tol: f64,
    },

    #[error("negative transition probability {value} at (s={state}, s'={next}, a={action})")]
    NegativeProbability {
        state: usize,
        next: usize,
        action: usize,
        value: f64,
    },

    #[error("cost at (s={state}, a={action}) is {value}; costs must be positive and finite")]
    InvalidCost {
        state: usize,
        action: usize,
        value: f64,
    },

    #[error("index out of range: {what} = {index}, limit {limit}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("dimension mismatch: {detail}")]
    DimensionMismatch { detail: String },

    #[error("value iteration did not converge: residual {residual} after {iterations} sweeps (tol {tol})")]
    NoConvergence {
        residual: f64,
        iterations: usize,
        tol: f64,
    },

    #[error("model would have {states} states, above the configured cap of {cap}")]
    StateCapExceeded { states: usize, cap: usize },

    #[error("empty input: {what}")]
    EmptyInput { what: &'static str },

    #[error("Q(s={state}, a={action}) = {value} is not strictly positive; exploration weights require Q > 0")]
    NonPositiveQ {
        state: usize,
        action: usize,
        value: f64,
    },

    #[error("ensemble member for environment order {order} is missing")]
    MissingMember { order: usize },

    #[error("{stage} stage failed")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            detail: detail.into(),
        }
    }

    /// Wrap an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
