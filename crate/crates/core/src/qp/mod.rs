//! Dense convex quadratic programs over polyhedra.
//!
//! Every Riccati step needs the minimizer of
//!
//! ```text
//!     minimize    K' Ω K + 2 ω' K
//!     subject to  H K <= d
//! ```
//!
//! for a small control dimension `n`. [`solve_qp`] runs a primal active-set
//! method whose equality-constrained subproblems are solved in range-space
//! form with two Cholesky factorizations. Multipliers follow the convention
//! `2 Ω K + 2 ω + H' μ = 0`, `μ >= 0`.

mod phase_one;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, serde_dense};

/// Absolute feasibility tolerance on `H K - d`.
pub const FEAS_TOLERANCE: f64 = 1e-9;
/// Smallest eigenvalue of `Ω` must exceed this.
pub const PD_TOLERANCE: f64 = 1e-12;
/// Bound on KKT residuals of returned solutions.
pub const KKT_TOLERANCE: f64 = 1e-9;
/// Diagonal shift applied when ridge regularization is enabled.
pub const RIDGE_EPSILON: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("constraint set is empty (phase-one violation {violation:.3e})")]
    Infeasible { violation: f64 },
    #[error("quadratic term is not positive definite (smallest eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("active-set iteration limit {limit} reached")]
    MaxIterations { limit: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// The set `{K : H K <= d}`. `k = 0` rows means unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyhedron {
    #[serde(with = "serde_dense::matrix")]
    pub h: DMatrix<f64>,
    #[serde(with = "serde_dense::vector")]
    pub d: DVector<f64>,
    /// Dimension of `K`; kept explicitly so that `k = 0` still knows `n`.
    pub dim: usize,
}

impl Polyhedron {
    pub fn new(h: DMatrix<f64>, d: DVector<f64>) -> Result<Self, QpError> {
        if h.nrows() != d.len() {
            return Err(QpError::Dimension(format!(
                "H has {} rows but d has {} entries",
                h.nrows(),
                d.len()
            )));
        }
        let dim = h.ncols();
        Ok(Self { h, d, dim })
    }

    pub fn unconstrained(dim: usize) -> Self {
        Self {
            h: DMatrix::zeros(0, dim),
            d: DVector::zeros(0),
            dim,
        }
    }

    /// `lower <= K <= upper` componentwise, i.e. `H = [I; -I]`, `d = [upper; -lower]`.
    pub fn from_bounds(lower: &DVector<f64>, upper: &DVector<f64>) -> Result<Self, QpError> {
        let n = lower.len();
        if upper.len() != n {
            return Err(QpError::Dimension("bound vectors differ in length".into()));
        }
        let mut h = DMatrix::zeros(2 * n, n);
        let mut d = DVector::zeros(2 * n);
        for i in 0..n {
            h[(i, i)] = 1.0;
            h[(n + i, i)] = -1.0;
            d[i] = upper[i];
            d[n + i] = -lower[i];
        }
        Self::new(h, d)
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// Same `H`, right-hand side multiplied by `scale`.
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            h: self.h.clone(),
            d: &self.d * scale,
            dim: self.dim,
        }
    }

    /// `max_i (H K - d)_i`, or `-inf` when there are no rows.
    pub fn max_violation(&self, k: &DVector<f64>) -> f64 {
        if self.rows() == 0 {
            return f64::NEG_INFINITY;
        }
        (&self.h * k - &self.d).max()
    }

    pub fn contains(&self, k: &DVector<f64>, tol: f64) -> bool {
        self.max_violation(k) <= tol
    }

    pub fn lerp(&self, other: &Self, theta: f64) -> Self {
        Self {
            h: linalg::lerp_matrix(&self.h, &other.h, theta),
            d: linalg::lerp_vector(&self.d, &other.d, theta),
            dim: self.dim,
        }
    }
}

/// Outcome of [`check_feasibility`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// `{K : H K <= d}` is nonempty.
    pub feasible: bool,
    #[serde(with = "serde_dense::vector")]
    pub witness: DVector<f64>,
    pub max_violation: f64,
    /// `{K : H K <= d, H K <= 0}` is nonempty (the scaled-constraint condition).
    pub cone_feasible: bool,
    #[serde(with = "serde_dense::vector")]
    pub cone_witness: DVector<f64>,
    pub cone_max_violation: f64,
}

/// Phase-one feasibility of both `{H K <= d}` and `{H K <= d, H K <= 0}`.
pub fn check_feasibility(region: &Polyhedron) -> FeasibilityReport {
    let plain = phase_one::phase_one(&region.h, &region.d);
    let capped = region.d.map(|x| x.min(0.0));
    let cone = phase_one::phase_one(&region.h, &capped);
    FeasibilityReport {
        feasible: plain.max_violation <= FEAS_TOLERANCE,
        witness: plain.witness,
        max_violation: plain.max_violation.max(0.0),
        cone_feasible: cone.max_violation <= FEAS_TOLERANCE,
        cone_witness: cone.witness,
        cone_max_violation: cone.max_violation.max(0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    #[serde(with = "serde_dense::matrix")]
    pub omega: DMatrix<f64>,
    #[serde(with = "serde_dense::vector")]
    pub w: DVector<f64>,
    pub region: Polyhedron,
}

impl QpProblem {
    /// Symmetrizes `omega` and checks dimensions.
    pub fn new(omega: DMatrix<f64>, w: DVector<f64>, region: Polyhedron) -> Result<Self, QpError> {
        let n = w.len();
        if omega.shape() != (n, n) || region.dim != n {
            return Err(QpError::Dimension(format!(
                "omega is {}x{}, w has {} entries, region acts on dimension {}",
                omega.nrows(),
                omega.ncols(),
                n,
                region.dim
            )));
        }
        Ok(Self {
            omega: linalg::symmetrize(&omega),
            w,
            region,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn objective(&self, k: &DVector<f64>) -> f64 {
        k.dot(&(&self.omega * k)) + 2.0 * self.w.dot(k)
    }

    /// Pretty JSON dump for bug reports.
    pub fn to_debug_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpOptions {
    pub feas_tolerance: f64,
    pub pd_tolerance: f64,
    /// Add `RIDGE_EPSILON * I` when `Ω` fails the definiteness check.
    pub ridge: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            feas_tolerance: FEAS_TOLERANCE,
            pd_tolerance: PD_TOLERANCE,
            ridge: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    #[serde(with = "serde_dense::vector")]
    pub k_star: DVector<f64>,
    pub value: f64,
    /// One multiplier per row of `H`, zero off the active set.
    #[serde(with = "serde_dense::vector")]
    pub multipliers: DVector<f64>,
    /// Sorted indices of the final working set.
    pub active_set: Vec<usize>,
    pub iterations: usize,
}

impl QpSolution {
    pub fn to_debug_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }
}

/// KKT residuals of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `||2 Ω K + 2 ω + H' μ||_inf`
    pub stationarity: f64,
    /// `max(0, max_i (H K - d)_i)`
    pub primal: f64,
    /// `max(0, -min_i μ_i)`
    pub dual: f64,
    /// `max_i |μ_i (H K - d)_i|`
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(problem: &QpProblem, k: &DVector<f64>, mu: &DVector<f64>) -> KktResiduals {
    let h = &problem.region.h;
    let grad = (&problem.omega * k + &problem.w) * 2.0 + h.transpose() * mu;
    let slack = h * k - &problem.region.d;
    let primal = slack.iter().fold(0.0_f64, |a, &s| a.max(s));
    let dual = mu.iter().fold(0.0_f64, |a, &m| a.max(-m));
    let complementarity = slack
        .iter()
        .zip(mu.iter())
        .fold(0.0_f64, |a, (&s, &m)| a.max((s * m).abs()));
    KktResiduals {
        stationarity: linalg::inf_norm(&grad),
        primal,
        dual,
        complementarity,
    }
}

/// Minimizer of the convex QP. `warm_start` is a previous working set; it is
/// used when it yields a feasible starting point and ignored otherwise.
pub fn solve_qp(
    problem: &QpProblem,
    options: &QpOptions,
    warm_start: Option<&[usize]>,
) -> Result<QpSolution, QpError> {
    let n = problem.dim();
    let mut omega = problem.omega.clone();
    let min_eig = linalg::min_eigenvalue(&omega);
    if min_eig <= options.pd_tolerance {
        if !options.ridge {
            return Err(QpError::NotPositiveDefinite {
                min_eigenvalue: min_eig,
            });
        }
        for i in 0..n {
            omega[(i, i)] += RIDGE_EPSILON;
        }
        let shifted = linalg::min_eigenvalue(&omega);
        if shifted <= options.pd_tolerance {
            return Err(QpError::NotPositiveDefinite {
                min_eigenvalue: shifted,
            });
        }
    }
    let chol = Cholesky::new(omega.clone()).ok_or(QpError::NotPositiveDefinite {
        min_eigenvalue: min_eig,
    })?;
    let solver = ActiveSet {
        chol,
        w: &problem.w,
        region: &problem.region,
        tol: options.feas_tolerance,
    };
    let (k_star, half_mu, active, iterations) = solver.run(warm_start)?;

    let mut multipliers = DVector::zeros(problem.region.rows());
    for (slot, &i) in active.iter().enumerate() {
        multipliers[i] = (2.0 * half_mu[slot]).max(0.0);
    }
    let mut active_set = active;
    active_set.sort_unstable();
    let value = k_star.dot(&(&omega * &k_star)) + 2.0 * problem.w.dot(&k_star);
    Ok(QpSolution {
        k_star,
        value,
        multipliers,
        active_set,
        iterations,
    })
}

/// Minimizer of `(P(α))`: `min u' Ω u + 2 α ω' u` over `{u : H u <= |α| d}`,
/// built from the solutions of the `α = 1` and `α = -1` problems.
pub fn scale_solution(k_hat: &DVector<f64>, k_bar: &DVector<f64>, alpha: f64) -> DVector<f64> {
    if alpha >= 0.0 {
        k_hat * alpha
    } else {
        k_bar * alpha.abs()
    }
}

/// Optimal value of `(P(α))` from the two unit-state values.
pub fn scale_value(v_hat: f64, v_bar: f64, alpha: f64) -> f64 {
    alpha * alpha * if alpha >= 0.0 { v_hat } else { v_bar }
}

/// Minimizer, multipliers, final working set and iteration count.
type ActiveSetResult = (DVector<f64>, DVector<f64>, Vec<usize>, usize);

struct ActiveSet<'a> {
    chol: Cholesky<f64, Dyn>,
    w: &'a DVector<f64>,
    region: &'a Polyhedron,
    tol: f64,
}

impl ActiveSet<'_> {
    /// Minimizer of `K'ΩK + 2ω'K` subject to `H_W K = d_W`, with the half
    /// multipliers `ν` of `ΩK + ω + H_W' ν = 0`. `None` when `H_W` is rank deficient.
    fn equality_solve(&self, working: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
        let omega_inv_w = self.chol.solve(self.w);
        if working.is_empty() {
            return Some((-omega_inv_w, DVector::zeros(0)));
        }
        let n = self.w.len();
        let m = working.len();
        let a = DMatrix::from_fn(m, n, |i, j| self.region.h[(working[i], j)]);
        let b = DVector::from_fn(m, |i, _| self.region.d[working[i]]);
        let omega_inv_at = self.chol.solve(&a.transpose());
        let schur = &a * &omega_inv_at;
        let scale = linalg::max_abs(&schur).max(f64::MIN_POSITIVE);
        let schur_chol = Cholesky::new(schur)?;
        let diag_min = schur_chol
            .l_dirty()
            .diagonal()
            .iter()
            .fold(f64::INFINITY, |acc, x| acc.min(x.abs()));
        if diag_min * diag_min < 1e-13 * scale {
            return None;
        }
        let nu = schur_chol.solve(&(-(b + &a * &omega_inv_w)));
        let k = -(omega_inv_w + omega_inv_at * &nu);
        Some((k, nu))
    }

    fn run(
        &self,
        warm_start: Option<&[usize]>,
    ) -> Result<ActiveSetResult, QpError> {
        let n = self.w.len();
        let k_rows = self.region.rows();

        // Unconstrained minimizer first; most Riccati steps end here.
        let (free, _) = self.equality_solve(&[]).expect("empty working set");
        if self.region.contains(&free, self.tol) {
            return Ok((free, DVector::zeros(0), Vec::new(), 0));
        }

        let (mut x, mut working) = self.starting_point(warm_start)?;
        let limit = 100 * (n + k_rows);
        let mut stalled = 0usize;
        let mut bland = false;

        for iter in 1..=limit {
            let (target, nu) = match self.equality_solve(&working) {
                Some(sol) => sol,
                None => {
                    // Dependent rows can only come from the start set; drop the newest.
                    working.pop();
                    continue;
                }
            };
            let step = &target - &x;

            let mut alpha = 1.0;
            let mut blocking: Option<usize> = None;
            for i in 0..k_rows {
                if working.contains(&i) {
                    continue;
                }
                let hi = self.region.h.row(i);
                let rate = (hi * &step)[0];
                if rate <= 1e-14 * (1.0 + linalg::inf_norm(&step)) {
                    continue;
                }
                let slack = (self.region.d[i] - (hi * &x)[0]).max(0.0);
                let ratio = slack / rate;
                // Strict comparison keeps the lowest index on ties.
                if ratio < alpha {
                    alpha = ratio;
                    blocking = Some(i);
                }
            }

            if let Some(i) = blocking {
                x += &step * alpha;
                working.push(i);
                if alpha <= 1e-14 {
                    stalled += 1;
                    if stalled >= 3 * n.max(1) {
                        bland = true;
                    }
                } else {
                    stalled = 0;
                }
                continue;
            }

            x = target;
            let neg: Vec<(usize, f64)> = nu
                .iter()
                .enumerate()
                .filter(|(_, &v)| v < -1e-13 * (1.0 + v.abs()))
                .map(|(slot, &v)| (slot, v))
                .collect();
            if neg.is_empty() {
                return Ok((x, nu, working, iter));
            }
            let drop_slot = if bland {
                neg.iter()
                    .min_by_key(|(slot, _)| working[*slot])
                    .map(|(slot, _)| *slot)
            } else {
                neg.iter()
                    .min_by(|a, b| {
                        a.1.partial_cmp(&b.1)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(working[a.0].cmp(&working[b.0]))
                    })
                    .map(|(slot, _)| *slot)
            };
            working.remove(drop_slot.expect("nonempty"));
        }
        Err(QpError::MaxIterations { limit })
    }

    fn starting_point(
        &self,
        warm_start: Option<&[usize]>,
    ) -> Result<(DVector<f64>, Vec<usize>), QpError> {
        if let Some(ws) = warm_start {
            let mut working: Vec<usize> = Vec::new();
            for &i in ws {
                if i < self.region.rows() && !working.contains(&i) {
                    working.push(i);
                    if self.equality_solve(&working).is_none() {
                        working.pop();
                    }
                }
            }
            if !working.is_empty() {
                if let Some((x, _)) = self.equality_solve(&working) {
                    if self.region.contains(&x, self.tol * 0.1) {
                        return Ok((x, working));
                    }
                }
            }
        }
        let p1 = phase_one::phase_one(&self.region.h, &self.region.d);
        if p1.max_violation > self.tol {
            return Err(QpError::Infeasible {
                violation: p1.max_violation,
            });
        }
        Ok((p1.witness, Vec::new()))
    }
}
