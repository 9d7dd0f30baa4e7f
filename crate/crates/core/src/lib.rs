//! Constrained scalar-state stochastic linear-quadratic control.
//!
//! The state `x(t)` is scalar and the control `u(t)` must satisfy
//! `H(t) u <= d(t) |x|`. The optimal policy is piecewise linear in `x`,
//! with one gain for `x >= 0` and one for `x < 0`, each driven by its own
//! Riccati-type ODE whose right-hand side embeds a small convex QP.
//!
//! Modules:
//! - [`qp`]: dense active-set QP and polyhedron feasibility.
//! - [`finite_horizon`]: the backward Riccati pair, gain schedules, policy and value.
//! - [`infinite_horizon`]: the algebraic Riccati pair, stationary gains, stability scalars.
//! - [`simulate`]: Euler–Maruyama Monte Carlo for closed-loop policies.
//! - [`meanvar`]: constrained dynamic mean-variance portfolio selection.
//! - [`config`]: JSON problem definitions with assumption checks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod export;
pub mod finite_horizon;
pub mod infinite_horizon;
pub mod linalg;
pub mod meanvar;
pub mod problem;
pub mod qp;
pub mod roots;
pub mod simulate;

pub use finite_horizon::{PiecewisePolicy, RiccatiOptions, RiccatiSolution};
pub use infinite_horizon::{StationaryOutcome, StationaryProblem, StationarySolution};
pub use meanvar::{MvProblem, MvSolution};
pub use problem::{Branch, Coefficients, ProblemData};
pub use qp::{Polyhedron, QpOptions, QpProblem, QpSolution};
pub use simulate::{PathEnsemble, SimConfig};
