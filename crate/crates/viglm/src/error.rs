//! Error type shared across the crate.

use thiserror::Error;

use crate::solvers::SolverTrace;

/// Errors produced by link evaluation, operator assembly, solving, and
/// inference.
#[derive(Debug, Error)]
pub enum Error {
    /// A link or loss was queried at a non-finite point.
    #[error("non-finite input z = {z}")]
    NonFiniteInput { z: f64 },

    /// A two-sided derivative was requested at a nondifferentiable point.
    #[error("two-sided derivative requested at a kink (z = {kink})")]
    DerivativeAtKink { kink: f64 },

    /// A loss was evaluated outside its domain.
    #[error("{family} loss evaluated outside its domain (u = {u})")]
    LossDomain { family: &'static str, u: f64 },

    /// Vector/matrix dimensions do not line up.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// An empirical operator was asked to average over zero observations.
    #[error("empty dataset")]
    EmptyDataset,

    /// A constructor or schedule was given an out-of-range parameter.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An iteration produced a non-finite or runaway iterate. The trace holds
    /// every iterate up to the last finite one.
    #[error("iteration diverged at step {iteration}")]
    Diverged {
        iteration: usize,
        trace: Box<SolverTrace>,
    },

    /// The (possibly ridge-repaired) Jacobian could not be inverted.
    #[error("jacobian is singular beyond ridge rescue")]
    SingularJacobian,

    /// A point handed to inference is not a zero of the estimating operator.
    #[error("estimate has not converged: residual norm {residual:.3e} exceeds {threshold:.3e}")]
    NotConverged { residual: f64, threshold: f64 },

    /// A CLI-facing spec string could not be parsed.
    #[error("cannot parse {what} spec `{input}`")]
    Parse { what: &'static str, input: String },

    /// Synthetic response generation received an invalid mean.
    #[error("link `{link}` produced mean {mean} outside the {family} response range")]
    Generation {
        link: String,
        family: &'static str,
        mean: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
