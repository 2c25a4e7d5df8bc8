//! Estimation toolkit for generalized linear models built around the
//! variational-inequality (VI) formulation of the likelihood equations.
//!
//! The estimating equation is the zero of the averaged field
//! V_N(β) = (1/N)·Σᵢ (g⁻¹(x̃ᵢᵀβ) − yᵢ)·x̃ᵢ, which coincides with the
//! likelihood score under canonical links and stays monotone-friendly under
//! links where the likelihood landscape flattens, kinks, or loses convexity.
//!
//! Module map:
//! - [`links`]: inverse-link catalog with one-sided derivatives and constants
//! - [`families`]: exponential-family losses and per-sample operators
//! - [`operators`]: empirical aggregates, Jacobians, Minty diagnostics
//! - [`solvers`]: fixed-point iteration, gradient descent, streaming scheme
//! - [`inference`]: error bound, sandwich covariances, coverage checks
//! - [`synth`]: reproducible synthetic experiment data
//! - [`harness`]: Monte-Carlo grid runner and trajectory export

pub mod error;
pub mod families;
pub mod harness;
pub mod inference;
pub mod links;
pub mod operators;
pub mod solvers;
pub mod synth;

pub use error::{Error, Result};
pub use families::{Family, Observation};
pub use harness::{CellRecord, CellResult, GridSpec, ScheduleTemplate};
pub use inference::{CovarianceEstimate, CoverageReport};
pub use links::{Link, Side};
pub use operators::{Dataset, MintyReport};
pub use solvers::{SolverTrace, StepSchedule};
pub use synth::{BetaStar, ExperimentConfig};
