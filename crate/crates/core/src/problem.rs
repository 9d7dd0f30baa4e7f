//! Problem data for the constrained LQ model
//!
//! ```text
//!     dx = (A x + B'u) dt + (x C' + u'D) dW,     H u <= d |x|
//!     cost = E[ ∫ (u, x)' Q (u, x) dt + q_T x(T)^2 ],   Q = [[R, S], [S', q]]
//! ```

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, serde_dense};
use crate::qp::{self, Polyhedron, QpOptions, QpProblem, QpSolution};

/// Which of the two state-sign branches a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// `x >= 0`: minimize `K'ΩK + 2ω'K`.
    Hat,
    /// `x < 0`: minimize `K'ΩK - 2ω'K`.
    Bar,
}

impl Branch {
    pub fn sign(self) -> f64 {
        match self {
            Branch::Hat => 1.0,
            Branch::Bar => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Hat => "hat",
            Branch::Bar => "bar",
        }
    }
}

/// A model assumption violated by some input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assumption {
    /// Constraint set nonempty (finite horizon).
    Feasibility,
    /// `Q ⪰ 0`, `DD' ≻ 0`.
    Convexity,
    /// Constraint set nonempty (infinite horizon).
    StationaryFeasibility,
    /// `Q ≻ 0`, `DD' ≻ 0`.
    StrictConvexity,
    /// Some asset has positive excess return.
    ExcessReturn,
    /// `σσ' ⪰ δ I`.
    Nondegenerate,
    /// Target beats the risk-free roll-up.
    Target,
    /// Shapes, grid ordering and other structural requirements.
    Structure,
}

impl Assumption {
    /// Short label used in diagnostics.
    pub fn label(&self) -> &'static str {
        match self {
            Assumption::Feasibility => "assumption-1 (constraint set nonempty)",
            Assumption::Convexity => "assumption-2 (Q psd, DD' pd)",
            Assumption::StationaryFeasibility => "assumption-3 (constraint set nonempty)",
            Assumption::StrictConvexity => "assumption-4 (Q pd, DD' pd)",
            Assumption::ExcessReturn => "assumption-5 (some positive excess return)",
            Assumption::Nondegenerate => "market nondegeneracy (sigma sigma' >= delta I)",
            Assumption::Target => "target exceeds risk-free growth",
            Assumption::Structure => "structure",
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
#[error("{} violated{}: {message}", assumption.label(), grid_index.map(|i| format!(" at grid index {i}")).unwrap_or_default())]
pub struct ValidationError {
    pub assumption: Assumption,
    pub grid_index: Option<usize>,
    pub message: String,
}

impl ValidationError {
    pub fn new(assumption: Assumption, grid_index: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            assumption,
            grid_index,
            message: message.into(),
        }
    }
}

/// Model coefficients at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub a: f64,
    #[serde(with = "serde_dense::vector")]
    pub b: DVector<f64>,
    #[serde(with = "serde_dense::vector")]
    pub c: DVector<f64>,
    /// `n x m` noise loading of the control.
    #[serde(with = "serde_dense::matrix")]
    pub d: DMatrix<f64>,
    #[serde(with = "serde_dense::matrix")]
    pub r: DMatrix<f64>,
    #[serde(with = "serde_dense::vector")]
    pub s: DVector<f64>,
    pub q: f64,
    pub region: Polyhedron,
}

impl Coefficients {
    pub fn control_dim(&self) -> usize {
        self.b.len()
    }

    pub fn noise_dim(&self) -> usize {
        self.c.len()
    }

    pub fn check_shapes(&self) -> Result<(), String> {
        let n = self.b.len();
        let m = self.c.len();
        if self.d.shape() != (n, m) {
            return Err(format!("D is {:?}, expected ({n}, {m})", self.d.shape()));
        }
        if self.r.shape() != (n, n) {
            return Err(format!("R is {:?}, expected ({n}, {n})", self.r.shape()));
        }
        if self.s.len() != n {
            return Err(format!("S has {} entries, expected {n}", self.s.len()));
        }
        if self.region.dim != n {
            return Err(format!("H has {} columns, expected {n}", self.region.dim));
        }
        Ok(())
    }

    /// `G D D' + R`
    pub fn omega(&self, g: f64) -> DMatrix<f64> {
        &self.d * self.d.transpose() * g + &self.r
    }

    /// `G (D C + B) + S`
    pub fn omega_linear(&self, g: f64) -> DVector<f64> {
        (&self.d * &self.c + &self.b) * g + &self.s
    }

    /// The inner problem `min_K K'(G DD' + R)K ± 2 (G(DC + B) + S)'K` over `{H K <= d}`.
    pub fn inner_problem(&self, g: f64, branch: Branch) -> QpProblem {
        QpProblem {
            omega: linalg::symmetrize(&self.omega(g)),
            w: self.omega_linear(g) * branch.sign(),
            region: self.region.clone(),
        }
    }

    /// Right-hand side `-G C'C - 2 G A - q - min f` of the Riccati ODE, with the minimizer.
    pub fn riccati_rhs(
        &self,
        g: f64,
        branch: Branch,
        options: &QpOptions,
        warm: Option<&[usize]>,
    ) -> Result<(f64, QpSolution), qp::QpError> {
        let sol = qp::solve_qp(&self.inner_problem(g, branch), options, warm)?;
        let rhs = -g * self.c.dot(&self.c) - 2.0 * g * self.a - self.q - sol.value;
        Ok((rhs, sol))
    }

    /// Right-hand side of the unconstrained Riccati equation,
    /// `-G C'C - 2GA - q + ω' Ω^{-1} ω` (the unconstrained minimum of `f` is
    /// `-ω' Ω^{-1} ω`). `None` when `Ω` is singular.
    pub fn unconstrained_rhs(&self, g: f64) -> Option<f64> {
        let omega = self.omega(g);
        let w = self.omega_linear(g);
        let sol = omega.cholesky()?.solve(&w);
        Some(-g * self.c.dot(&self.c) - 2.0 * g * self.a - self.q + w.dot(&sol))
    }

    /// `[[R, S], [S', q]]`
    pub fn cost_matrix(&self) -> DMatrix<f64> {
        let n = self.control_dim();
        let mut q = DMatrix::zeros(n + 1, n + 1);
        q.view_mut((0, 0), (n, n)).copy_from(&self.r);
        for i in 0..n {
            q[(i, n)] = self.s[i];
            q[(n, i)] = self.s[i];
        }
        q[(n, n)] = self.q;
        q
    }

    /// Running cost `u'Ru + 2 x S'u + q x^2`.
    pub fn running_cost(&self, x: f64, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.r * u)) + 2.0 * x * self.s.dot(u) + self.q * x * x
    }

    pub fn lerp(&self, other: &Self, theta: f64) -> Self {
        Self {
            a: self.a * (1.0 - theta) + other.a * theta,
            b: linalg::lerp_vector(&self.b, &other.b, theta),
            c: linalg::lerp_vector(&self.c, &other.c, theta),
            d: linalg::lerp_matrix(&self.d, &other.d, theta),
            r: linalg::lerp_matrix(&self.r, &other.r, theta),
            s: linalg::lerp_vector(&self.s, &other.s, theta),
            q: self.q * (1.0 - theta) + other.q * theta,
            region: self.region.lerp(&other.region, theta),
        }
    }

    /// Checks `Q ⪰ 0` (or `≻ 0` when `strict`) and `DD' ≻ 0`.
    pub fn check_convexity(&self, strict: bool) -> Result<(), String> {
        let q_min = linalg::min_eigenvalue(&linalg::symmetrize(&self.cost_matrix()));
        let scale = linalg::max_abs(&self.cost_matrix()).max(1.0);
        if strict && q_min <= qp::PD_TOLERANCE {
            return Err(format!("Q is not positive definite (smallest eigenvalue {q_min:.3e})"));
        }
        if !strict && q_min < -1e-12 * scale {
            return Err(format!("Q is not positive semidefinite (smallest eigenvalue {q_min:.3e})"));
        }
        let dd_min = linalg::min_eigenvalue(&(&self.d * self.d.transpose()));
        if dd_min <= qp::PD_TOLERANCE {
            return Err(format!("DD' is not positive definite (smallest eigenvalue {dd_min:.3e})"));
        }
        Ok(())
    }
}

/// Coefficients on a time grid `0 = t_0 < ... < t_N = T`, with terminal weight `q_T`.
///
/// `slices` holds either one entry (time-invariant data) or one entry per grid
/// point; between grid points coefficients are interpolated linearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemData {
    pub grid: Vec<f64>,
    pub slices: Vec<Coefficients>,
    pub q_terminal: f64,
}

/// Default number of integration steps for a horizon `T`.
///
/// `max(1000, ceil(T / 1e-4))` for `T <= 1`; longer horizons use steps of at most `1e-2`.
pub fn default_steps(horizon: f64) -> usize {
    if horizon <= 1.0 {
        ((horizon / 1e-4).ceil() as usize).max(1000)
    } else {
        ((horizon / 1e-2).ceil() as usize).max(1000)
    }
}

pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps)
        .map(|i| {
            if i == steps {
                horizon
            } else {
                horizon * i as f64 / steps as f64
            }
        })
        .collect()
}

impl ProblemData {
    pub fn constant(coefficients: Coefficients, horizon: f64, steps: usize, q_terminal: f64) -> Self {
        Self {
            grid: uniform_grid(horizon, steps),
            slices: vec![coefficients],
            q_terminal,
        }
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap_or(&0.0)
    }

    pub fn steps(&self) -> usize {
        self.grid.len().saturating_sub(1)
    }

    pub fn control_dim(&self) -> usize {
        self.slices[0].control_dim()
    }

    pub fn is_time_invariant(&self) -> bool {
        self.slices.len() == 1
    }

    /// Same coefficients re-gridded uniformly. Only valid for time-invariant data.
    pub fn with_steps(&self, steps: usize) -> Self {
        assert!(self.is_time_invariant(), "re-gridding needs time-invariant data");
        Self {
            grid: uniform_grid(self.horizon(), steps),
            slices: self.slices.clone(),
            q_terminal: self.q_terminal,
        }
    }

    /// Coefficients at grid index `i`.
    pub fn slice(&self, i: usize) -> &Coefficients {
        if self.slices.len() == 1 {
            &self.slices[0]
        } else {
            &self.slices[i]
        }
    }

    /// Coefficients at time `t`, interpolated linearly between grid points.
    pub fn at(&self, t: f64) -> Cow<'_, Coefficients> {
        if self.slices.len() == 1 {
            return Cow::Borrowed(&self.slices[0]);
        }
        let (i, theta) = locate(&self.grid, t);
        if theta == 0.0 {
            Cow::Borrowed(&self.slices[i])
        } else {
            Cow::Owned(self.slices[i].lerp(&self.slices[i + 1], theta))
        }
    }

    /// Structural checks plus the feasibility and convexity assumptions at every grid point.
    ///
    /// Returns warnings for grid points where `{H K <= d, H K <= 0}` is empty
    /// even though `{H K <= d}` is not.
    pub fn validate(&self) -> Result<Vec<String>, ValidationError> {
        if self.grid.len() < 2 {
            return Err(ValidationError::new(Assumption::Structure, None, "grid needs at least two points"));
        }
        if self.grid[0] != 0.0 {
            return Err(ValidationError::new(Assumption::Structure, Some(0), "grid must start at 0"));
        }
        if let Some(i) = self.grid.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(ValidationError::new(Assumption::Structure, Some(i + 1), "grid must be strictly increasing"));
        }
        if self.slices.len() != 1 && self.slices.len() != self.grid.len() {
            return Err(ValidationError::new(
                Assumption::Structure,
                None,
                format!("{} coefficient slices for {} grid points", self.slices.len(), self.grid.len()),
            ));
        }
        if !(self.q_terminal >= 0.0) {
            return Err(ValidationError::new(Assumption::Convexity, None, "terminal weight q_T must be >= 0"));
        }
        let n = self.slices[0].control_dim();
        let m = self.slices[0].noise_dim();
        let mut warnings = Vec::new();
        for (i, s) in self.slices.iter().enumerate() {
            let idx = (self.slices.len() > 1).then_some(i);
            s.check_shapes()
                .map_err(|e| ValidationError::new(Assumption::Structure, idx, e))?;
            if s.control_dim() != n || s.noise_dim() != m {
                return Err(ValidationError::new(Assumption::Structure, idx, "dimensions change along the grid"));
            }
            s.check_convexity(false)
                .map_err(|e| ValidationError::new(Assumption::Convexity, idx, e))?;
            let rep = qp::check_feasibility(&s.region);
            if !rep.feasible {
                return Err(ValidationError::new(
                    Assumption::Feasibility,
                    idx,
                    format!("{{K : H K <= d}} is empty (phase-one violation {:.3e})", rep.max_violation),
                ));
            }
            if !rep.cone_feasible {
                warnings.push(format!(
                    "{}{}: {{K : H K <= d, H K <= 0}} is empty",
                    Assumption::Feasibility.label(),
                    idx.map(|i| format!(" at grid index {i}")).unwrap_or_default()
                ));
            }
        }
        Ok(warnings)
    }
}

/// Index `i` and weight `theta` with `t = (1 - theta) grid[i] + theta grid[i + 1]`.
/// Times outside the grid are clamped.
pub fn locate(grid: &[f64], t: f64) -> (usize, f64) {
    let last = grid.len() - 1;
    if t <= grid[0] {
        return (0, 0.0);
    }
    if t >= grid[last] {
        return (last, 0.0);
    }
    let i = grid.partition_point(|&g| g <= t) - 1;
    let span = grid[i + 1] - grid[i];
    (i, (t - grid[i]) / span)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn scalar_toy() -> Coefficients {
        Coefficients {
            a: 0.0,
            b: DVector::from_element(1, 1.0),
            c: DVector::from_element(1, 0.0),
            d: DMatrix::from_element(1, 1, 1.0),
            r: DMatrix::from_element(1, 1, 1.0),
            s: DVector::from_element(1, 0.0),
            q: 1.0,
            region: Polyhedron::unconstrained(1),
        }
    }

    #[test]
    fn locate_interior_and_clamped() {
        let grid = [0.0, 0.5, 1.0];
        assert_eq!(locate(&grid, 0.25), (0, 0.5));
        assert_eq!(locate(&grid, 0.5), (1, 0.0));
        assert_eq!(locate(&grid, 2.0), (2, 0.0));
        assert_eq!(locate(&grid, -1.0), (0, 0.0));
    }

    #[test]
    fn default_steps_rule() {
        assert_eq!(default_steps(0.1), 1000);
        assert_eq!(default_steps(1.0), 10_000);
        assert_eq!(default_steps(12.0), 1200);
    }

    #[test]
    fn negative_state_weight_fails_convexity() {
        let mut c = scalar_toy();
        c.q = -1.0;
        let data = ProblemData::constant(c, 1.0, 10, 0.0);
        let err = data.validate().unwrap_err();
        assert_eq!(err.assumption, Assumption::Convexity);
    }

    #[test]
    fn contradictory_bounds_fail_feasibility() {
        let mut c = scalar_toy();
        c.region = Polyhedron::new(
            DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![-1.0, -1.0]),
        )
        .unwrap();
        let data = ProblemData::constant(c, 1.0, 10, 0.0);
        assert_eq!(data.validate().unwrap_err().assumption, Assumption::Feasibility);
    }

    #[test]
    fn interpolates_between_slices() {
        let c0 = scalar_toy();
        let mut c1 = scalar_toy();
        c1.a = 2.0;
        let data = ProblemData {
            grid: vec![0.0, 1.0],
            slices: vec![c0, c1],
            q_terminal: 0.0,
        };
        assert!((data.at(0.25).a - 0.5).abs() < 1e-15);
    }
}
