use thiserror::Error;

use crate::dynamics::Vertex;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// `log` is only injective for half-angles strictly below pi.
    #[error("quaternion is within {tol:e} rad of the antipode of the identity")]
    Antipode { tol: f64 },

    #[error("mass matrix is singular or badly conditioned (estimate {cond:e})")]
    SingularMassMatrix { cond: f64 },

    #[error("contact KKT system is rank deficient")]
    SingularKkt,

    #[error("state is not on the {vertex:?} guard (guard value {value:e})")]
    GuardViolation { vertex: Vertex, value: f64 },

    #[error("event bisection failed to converge after {iterations} iterations (|g| = {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },

    #[error("more than {limit} hybrid events; execution looks Zeno")]
    MaxEventsExceeded { limit: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
