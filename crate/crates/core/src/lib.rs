//! Certified-safe stochastic optimal control for single agents and networked
//! multi-agent systems.
//!
//! The crate estimates linearly-solvable optimal controls by Monte-Carlo path
//! integrals over passive-dynamics rollouts, filters them through stochastic
//! zero-CBF constraints with a minimum-deviation QP, and generalizes solved
//! tasks to new targets by mixing component controllers with
//! desirability-weighted kernel weights.
//!
//! Module map:
//!
//! * [`sde`]: control-affine Itô diffusions, counter-based noise streams and
//!   Euler–Maruyama integration.
//! * [`lsoc`]: path-integral estimation of the desirability and the optimal
//!   control, plus a finite-difference HJB oracle for small problems.
//! * [`zcbf`]: zero-CBF chains for high relative degree, affine constraints and
//!   the QP safety filter.
//! * [`mas`]: communication graphs and factorial subsystems.
//! * [`compose`]: composition weights and composite control laws.
//! * [`scenarios`]: UAV dynamics, costs, obstacles and the scenario file.
//! * [`harness`]: experiment runners, metrics and exports.

// `!(x > 0.0)` is used deliberately so NaN fails argument checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compose;
pub mod harness;
pub mod lsoc;
pub mod mas;
pub mod numeric;
pub mod scenarios;
pub mod sde;
pub mod zcbf;

pub use compose::{ComposeError, CompositionWeights};
pub use harness::{HarnessError, RunMode, RunResult};
pub use lsoc::{LsocError, LsocProblem, RolloutBatch};
pub use mas::{AgentGraph, FactorialSubsystem, MasError};
pub use scenarios::{Scenario, ScenarioError};
pub use sde::{ControlAffine, ControlAffineDynamics, NoiseStream, SdeError, Trajectory};
pub use zcbf::{AffineConstraint, Barrier, ZcbfChain, ZcbfError};
