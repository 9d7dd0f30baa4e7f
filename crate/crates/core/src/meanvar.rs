//! Dynamic mean-variance portfolio selection under cone constraints `H u >= 0`.
//!
//! The wealth equation `dx = (r x + b'u) dt + u'σ dW` with `b = μ - r1` is an
//! instance of the scalar LQ model with `A = r`, `B = b`, `C = 0`, `D = σ`,
//! `q = 0`, `S = 0`, `q_T = 1`. Writing `z = x - λρ(t)` with
//! `ρ(t) = exp(-∫_t^T r)`, the optimal policy is `K̂(t) z` for `z >= 0` and
//! `-K̄(t) z` otherwise, and the multiplier is
//!
//! ```text
//!     λ* = (d - x0 Ḡ(0) ρ(0)) / (1 - Ḡ(0) ρ(0)²).
//! ```
//!
//! At `λ*` the optimal variance is
//! `Ḡ(0)ρ(0)² / (1 - Ḡ(0)ρ(0)²) · (d - x0/ρ(0))² - ∫ E[u'Ru] dt`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finite_horizon::{solve_riccati_pair, RiccatiError, RiccatiOptions, RiccatiSolution};
use crate::linalg::{self, serde_dense};
use crate::problem::{locate, Assumption, Branch, Coefficients, ProblemData, ValidationError};
use crate::qp::{self, Polyhedron, QpError, QpOptions, QpProblem};
use crate::simulate::{simulate_paths, Estimate, Policy, SimConfig, SimError};

/// Smallest eigenvalue `σσ'` must exceed.
pub const NONDEGENERACY_DELTA: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MvError {
    #[error("invalid market: {0}")]
    InvalidMarket(ValidationError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("1 - Ḡ(0)ρ(0)² = {gap:.3e} is numerically zero; the multiplier is undefined")]
    DegenerateMultiplier { gap: f64 },
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("benchmark QP failed: {0}")]
    Benchmark(#[from] QpError),
}

fn invalid(assumption: Assumption, grid_index: Option<usize>, message: impl Into<String>) -> MvError {
    MvError::InvalidMarket(ValidationError::new(assumption, grid_index, message))
}

/// Market data at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSlice {
    pub r: f64,
    #[serde(with = "serde_dense::vector")]
    pub mu: DVector<f64>,
    #[serde(with = "serde_dense::matrix")]
    pub sigma: DMatrix<f64>,
    /// `k x n` cone matrix of the constraint `H u >= 0`.
    #[serde(with = "serde_dense::matrix")]
    pub cone: DMatrix<f64>,
    /// Penalty `R` on `u'Ru`.
    #[serde(with = "serde_dense::matrix")]
    pub penalty: DMatrix<f64>,
}

impl MarketSlice {
    pub fn assets(&self) -> usize {
        self.mu.len()
    }

    /// `b = μ - r 1`
    pub fn excess_return(&self) -> DVector<f64> {
        self.mu.add_scalar(-self.r)
    }

    /// Cone rows `e_i'` for the listed (zero-based) assets, so `H u >= 0` means `u_i >= 0`.
    pub fn no_short_cone(n: usize, assets: &[usize]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(assets.len(), n);
        for (row, &i) in assets.iter().enumerate() {
            h[(row, i)] = 1.0;
        }
        h
    }

    fn coefficients(&self) -> Coefficients {
        let n = self.assets();
        let k = self.cone.nrows();
        Coefficients {
            a: self.r,
            b: self.excess_return(),
            c: DVector::zeros(self.sigma.ncols()),
            d: self.sigma.clone(),
            r: self.penalty.clone(),
            s: DVector::zeros(n),
            q: 0.0,
            region: Polyhedron {
                h: -&self.cone,
                d: DVector::zeros(k),
                dim: n,
            },
        }
    }

    fn lerp(&self, other: &Self, theta: f64) -> Self {
        Self {
            r: self.r * (1.0 - theta) + other.r * theta,
            mu: linalg::lerp_vector(&self.mu, &other.mu, theta),
            sigma: linalg::lerp_matrix(&self.sigma, &other.sigma, theta),
            cone: linalg::lerp_matrix(&self.cone, &other.cone, theta),
            penalty: linalg::lerp_matrix(&self.penalty, &other.penalty, theta),
        }
    }
}

/// Sample mean and volatility from per-period asset returns (one row per
/// period). The volatility is the symmetric square root of the sample
/// covariance, with an `n - 1` denominator.
pub fn estimate_market(returns: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>), MvError> {
    let rows = serde_dense::from_rows(returns).map_err(|e| invalid(Assumption::Structure, None, e))?;
    let (t, n) = rows.shape();
    if t < 2 || n == 0 {
        return Err(invalid(Assumption::Structure, None, "need at least two periods of returns"));
    }
    let mean = rows.row_mean().transpose();
    let centered = DMatrix::from_fn(t, n, |i, j| rows[(i, j)] - mean[j]);
    let cov = linalg::symmetrize(&(centered.transpose() * &centered / (t - 1) as f64));
    let eig = cov.symmetric_eigen();
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let sigma = &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
    Ok((mean, linalg::symmetrize(&sigma)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvProblem {
    pub grid: Vec<f64>,
    /// One slice (constant market) or one per grid point.
    pub market: Vec<MarketSlice>,
    pub x0: f64,
    /// Target expected terminal wealth `d`.
    pub target: f64,
}

impl MvProblem {
    pub fn constant(market: MarketSlice, horizon: f64, steps: usize, x0: f64, target: f64) -> Self {
        Self {
            grid: crate::problem::uniform_grid(horizon, steps),
            market: vec![market],
            x0,
            target,
        }
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap_or(&0.0)
    }

    pub fn slice(&self, i: usize) -> &MarketSlice {
        if self.market.len() == 1 {
            &self.market[0]
        } else {
            &self.market[i]
        }
    }

    pub fn market_at(&self, t: f64) -> MarketSlice {
        if self.market.len() == 1 {
            return self.market[0].clone();
        }
        let (i, theta) = locate(&self.grid, t);
        if theta == 0.0 {
            self.market[i].clone()
        } else {
            self.market[i].lerp(&self.market[i + 1], theta)
        }
    }

    /// `ρ(t_i) = exp(-∫_{t_i}^T r)` on the grid, by the trapezoid rule (exact
    /// for piecewise-linear `r`).
    pub fn discount(&self) -> Vec<f64> {
        let n = self.grid.len();
        let mut log_rho = vec![0.0; n];
        for i in (0..n - 1).rev() {
            let h = self.grid[i + 1] - self.grid[i];
            log_rho[i] = log_rho[i + 1] - 0.5 * h * (self.slice(i).r + self.slice(i + 1).r);
        }
        log_rho.into_iter().map(f64::exp).collect()
    }

    /// Risk-free roll-up `x0 / ρ(0)`: the smallest admissible target.
    pub fn riskless_target(&self) -> f64 {
        self.x0 / self.discount()[0]
    }

    /// Nondegeneracy, positive excess return, penalty PSD, shapes, and the target condition.
    pub fn validate(&self) -> Result<(), MvError> {
        if self.grid.len() < 2 || self.grid[0] != 0.0 || self.grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid(Assumption::Structure, None, "grid must start at 0 and increase strictly"));
        }
        if self.market.len() != 1 && self.market.len() != self.grid.len() {
            return Err(invalid(Assumption::Structure, None, "market slices must be 1 or one per grid point"));
        }
        let n = self.market[0].assets();
        if n == 0 {
            return Err(invalid(Assumption::Structure, None, "no risky assets"));
        }
        for (i, s) in self.market.iter().enumerate() {
            let idx = (self.market.len() > 1).then_some(i);
            if s.assets() != n || s.sigma.nrows() != n || s.penalty.shape() != (n, n) || s.cone.ncols() != n {
                return Err(invalid(Assumption::Structure, idx, format!("market dimensions must agree with {n} assets")));
            }
            let eig = linalg::min_eigenvalue(&(&s.sigma * s.sigma.transpose()));
            if eig <= NONDEGENERACY_DELTA {
                return Err(invalid(
                    Assumption::Nondegenerate,
                    idx,
                    format!("smallest eigenvalue of sigma sigma' is {eig:.3e}"),
                ));
            }
            if !s.excess_return().iter().any(|&b| b > 0.0) {
                return Err(invalid(Assumption::ExcessReturn, idx, "no asset has mu_i > r"));
            }
            let pen = linalg::min_eigenvalue(&linalg::symmetrize(&s.penalty));
            if pen < -1e-12 * linalg::max_abs(&s.penalty).max(1.0) {
                return Err(invalid(Assumption::Convexity, idx, format!("penalty R is not PSD (eigenvalue {pen:.3e})")));
            }
        }
        if !(self.x0 > 0.0) {
            return Err(invalid(Assumption::Structure, None, "initial wealth x0 must be > 0"));
        }
        let floor = self.riskless_target();
        if self.target < floor * (1.0 - 1e-12) {
            return Err(invalid(
                Assumption::Target,
                None,
                format!("target {} is below the risk-free roll-up x0/rho(0) = {floor}", self.target),
            ));
        }
        Ok(())
    }
}

/// The embedded LQ instance: `A = r`, `B = μ - r1`, `C = 0`, `D = σ`, `q = 0`,
/// `S = 0`, `q_T = 1`, constraint `-H u <= 0`.
pub fn embed(problem: &MvProblem) -> Result<ProblemData, MvError> {
    problem.validate()?;
    Ok(ProblemData {
        grid: problem.grid.clone(),
        slices: problem.market.iter().map(MarketSlice::coefficients).collect(),
        q_terminal: 1.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvSolution {
    pub lambda_star: f64,
    pub x0: f64,
    pub target: f64,
    /// `ρ(t)` on the grid.
    pub rho: Vec<f64>,
    pub riccati: RiccatiSolution,
}

impl MvSolution {
    pub fn grid(&self) -> &[f64] {
        &self.riccati.grid
    }

    pub fn g_hat_mv(&self) -> &[f64] {
        &self.riccati.g_hat
    }

    pub fn g_bar_mv(&self) -> &[f64] {
        &self.riccati.g_bar
    }

    /// `ρ(t)`, interpolated linearly in `log ρ`.
    pub fn rho_at(&self, t: f64) -> f64 {
        let (i, theta) = locate(&self.riccati.grid, t);
        if theta == 0.0 {
            self.rho[i]
        } else {
            (self.rho[i].ln() * (1.0 - theta) + self.rho[i + 1].ln() * theta).exp()
        }
    }

    /// `Ḡ(0) ρ(0)²`
    pub fn bar_discount_product(&self) -> f64 {
        self.riccati.g_bar[0] * self.rho[0] * self.rho[0]
    }

    /// Multiplier for another target with the same market.
    pub fn lambda_for(&self, target: f64) -> Result<f64, MvError> {
        lambda_star(self.riccati.g_bar[0], self.rho[0], self.x0, target)
    }

    /// Dual function `v(λ) = G(0)(x0 - λρ(0))² - (λ - d)²`, with `Ĝ(0)` when
    /// `x0 >= λρ(0)` and `Ḡ(0)` otherwise.
    pub fn dual_value(&self, lambda: f64) -> f64 {
        let z0 = self.x0 - lambda * self.rho[0];
        let g0 = if z0 >= 0.0 { self.riccati.g_hat[0] } else { self.riccati.g_bar[0] };
        g0 * z0 * z0 - (lambda - self.target).powi(2)
    }

    /// `Ḡρ²/(1 - Ḡρ²) · (d - x0/ρ(0))²`: the variance before the penalty term.
    pub fn frontier_first_term(&self, target: f64) -> f64 {
        let a = self.bar_discount_product();
        a / (1.0 - a) * (target - self.x0 / self.rho[0]).powi(2)
    }

    /// The same expression with `x0 ρ(0)` in place of `x0/ρ(0)`. It does not
    /// vanish at the risk-free target and is kept only for comparison.
    pub fn frontier_first_term_alt(&self, target: f64) -> f64 {
        let a = self.bar_discount_product();
        a / (1.0 - a) * (target - self.x0 * self.rho[0]).powi(2)
    }

    pub fn policy(&self, lambda: f64) -> MvPolicy<'_> {
        MvPolicy { solution: self, lambda }
    }
}

/// `λ = (d - x0 Ḡ(0) ρ(0)) / (1 - Ḡ(0) ρ(0)²)`
pub fn lambda_star(g_bar0: f64, rho0: f64, x0: f64, target: f64) -> Result<f64, MvError> {
    let gap = 1.0 - g_bar0 * rho0 * rho0;
    if gap.abs() < 1e-12 {
        return Err(MvError::DegenerateMultiplier { gap });
    }
    Ok((target - x0 * g_bar0 * rho0) / gap)
}

/// Runs the Riccati pair on the embedded instance and computes `λ*`.
pub fn solve_mv(problem: &MvProblem, options: &RiccatiOptions) -> Result<MvSolution, MvError> {
    let data = embed(problem)?;
    let riccati = solve_riccati_pair(&data, options)?;
    let rho = problem.discount();
    let lambda = lambda_star(riccati.g_bar[0], rho[0], problem.x0, problem.target)?;
    Ok(MvSolution {
        lambda_star: lambda,
        x0: problem.x0,
        target: problem.target,
        rho,
        riccati,
    })
}

/// `u = K̂(t) z` for `z = x - λρ(t) >= 0`, `-K̄(t) z` otherwise.
#[derive(Debug, Clone, Copy)]
pub struct MvPolicy<'a> {
    pub solution: &'a MvSolution,
    pub lambda: f64,
}

impl MvPolicy<'_> {
    pub fn shifted_state(&self, t: f64, x: f64) -> f64 {
        x - self.lambda * self.solution.rho_at(t)
    }
}

impl Policy for MvPolicy<'_> {
    fn control_into(&self, t: f64, x: f64, u: &mut DVector<f64>) {
        let z = self.shifted_state(t, x);
        let branch = if z >= 0.0 { Branch::Hat } else { Branch::Bar };
        self.solution.riccati.gain_into(branch, t, u);
        *u *= z.abs();
    }
}

/// Default Monte Carlo settings for the frontier: `10⁵` paths, `Δ = T/1200`,
/// antithetic pairs, seed 42.
pub fn default_frontier_sim(problem: &MvProblem) -> SimConfig {
    let horizon = problem.horizon();
    let mut cfg = SimConfig::new(100_000, horizon / 1200.0, horizon, 42, problem.x0);
    cfg.antithetic = true;
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub target: f64,
    pub lambda: f64,
    /// `Ḡρ²/(1 - Ḡρ²) · (d - x0/ρ(0))²`
    pub first_term: f64,
    /// Monte Carlo `∫ E[u'Ru] dt`.
    pub penalty: Estimate,
    /// `first_term - penalty`
    pub variance: f64,
    pub std_dev: f64,
    /// Monte Carlo terminal mean and variance, as a cross-check.
    pub mc_mean: Estimate,
    pub mc_variance: f64,
    /// The penalty exceeds the first term by more than 3 standard errors.
    pub negative_variance: bool,
}

/// Frontier points for each target, sharing one Riccati solution.
pub fn efficient_frontier(
    problem: &MvProblem,
    solution: &MvSolution,
    targets: &[f64],
    sim: &SimConfig,
) -> Result<Vec<FrontierPoint>, MvError> {
    let data = embed(problem)?;
    let mut cfg = *sim;
    cfg.x0 = problem.x0;
    cfg.horizon = problem.horizon();
    targets
        .iter()
        .map(|&target| {
            let lambda = solution.lambda_for(target)?;
            let first_term = solution.frontier_first_term(target);
            let ens = simulate_paths(&data, &solution.policy(lambda), &cfg)?;
            let penalty = ens.penalty();
            let variance = first_term - penalty.mean;
            Ok(FrontierPoint {
                target,
                lambda,
                first_term,
                penalty,
                variance,
                std_dev: variance.max(0.0).sqrt(),
                mc_mean: ens.terminal_mean(),
                mc_variance: ens.terminal_variance(),
                negative_variance: penalty.mean - first_term > 3.0 * penalty.std_error,
            })
        })
        .collect()
}

/// Monte Carlo `E[x(T)]` under the optimal policy for the solved target.
pub fn verify_terminal_mean(problem: &MvProblem, solution: &MvSolution, sim: &SimConfig) -> Result<Estimate, MvError> {
    let data = embed(problem)?;
    let mut cfg = *sim;
    cfg.x0 = problem.x0;
    cfg.horizon = problem.horizon();
    let ens = simulate_paths(&data, &solution.policy(solution.lambda_star), &cfg)?;
    Ok(ens.terminal_mean())
}

/// `target, lambda, std_dev, variance, first_term, penalty, penalty_se, mc_mean, mc_mean_se, mc_std_dev`
pub fn frontier_csv(points: &[FrontierPoint]) -> String {
    let header = [
        "target", "lambda", "std_dev", "variance", "first_term", "penalty", "penalty_se", "mc_mean", "mc_mean_se",
        "mc_std_dev",
    ]
    .map(String::from);
    let rows = points.iter().map(|p| {
        [
            p.target,
            p.lambda,
            p.std_dev,
            p.variance,
            p.first_term,
            p.penalty.mean,
            p.penalty.std_error,
            p.mc_mean.mean,
            p.mc_mean.std_error,
            p.mc_variance.sqrt(),
        ]
    });
    crate::export::csv_table(&header, rows)
}

/// Single-period buy-and-hold portfolio: amounts `π` fixed at `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPoint {
    pub target: f64,
    #[serde(with = "serde_dense::vector")]
    pub weights: DVector<f64>,
    pub std_dev: f64,
}

/// Mean excess `m_i = e^{μ_i T} - e^{rT}` and covariance
/// `Cov_ij = e^{(μ_i + μ_j)T}(e^{Σ_ij T} - 1)` of the gross returns, `Σ = σσ'`.
fn gross_return_moments(s: &MarketSlice, horizon: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = s.assets();
    let cov_rate = &s.sigma * s.sigma.transpose();
    let growth = (s.r * horizon).exp();
    let m = DVector::from_fn(n, |i, _| (s.mu[i] * horizon).exp() - growth);
    let cov = DMatrix::from_fn(n, n, |i, j| {
        ((s.mu[i] + s.mu[j]) * horizon).exp() * (cov_rate[(i, j)] * horizon).exp_m1()
    });
    (m, cov)
}

/// Minimum-variance buy-and-hold portfolio reaching `E[x(T)] = target`,
/// with the same cone constraint and a `T · π'Rπ` penalty.
pub fn buy_and_hold(problem: &MvProblem, target: f64) -> Result<BenchmarkPoint, MvError> {
    problem.validate()?;
    if problem.market.len() != 1 {
        return Err(invalid(Assumption::Structure, None, "the buy-and-hold benchmark needs a constant market"));
    }
    let s = &problem.market[0];
    let horizon = problem.horizon();
    let n = s.assets();
    let (m, cov) = gross_return_moments(s, horizon);
    let excess = target - problem.x0 * (s.r * horizon).exp();
    let k = s.cone.nrows();
    let mut h = DMatrix::zeros(k + 2, n);
    let mut d = DVector::zeros(k + 2);
    h.view_mut((0, 0), (k, n)).copy_from(&(-&s.cone));
    h.row_mut(k).copy_from(&m.transpose());
    h.row_mut(k + 1).copy_from(&(-m.transpose()));
    d[k] = excess;
    d[k + 1] = -excess;
    let omega = &cov + &s.penalty * horizon;
    let qp_problem = QpProblem::new(omega, DVector::zeros(n), Polyhedron::new(h, d)?)?;
    let sol = qp::solve_qp(&qp_problem, &QpOptions::default(), None)?;
    let variance = sol.k_star.dot(&(&cov * &sol.k_star));
    Ok(BenchmarkPoint {
        target,
        std_dev: variance.max(0.0).sqrt(),
        weights: sol.k_star,
    })
}

/// `target, std_dev` of the buy-and-hold frontier.
pub fn benchmark_csv(points: &[BenchmarkPoint]) -> String {
    let header = ["target", "std_dev"].map(String::from);
    crate::export::csv_table(&header, points.iter().map(|p| [p.target, p.std_dev]))
}

/// Wealth of the dynamic policy and of the buy-and-hold portfolio along the
/// same simulated price paths: rows `t, dynamic_0, benchmark_0, dynamic_1, ...`.
pub fn wealth_paths_csv(
    problem: &MvProblem,
    solution: &MvSolution,
    benchmark: &BenchmarkPoint,
    paths: usize,
    steps: usize,
    seed: u64,
) -> String {
    let s = &problem.market[0];
    let n = s.assets();
    let horizon = problem.horizon();
    let dt = horizon / steps as f64;
    let policy = solution.policy(solution.lambda_star);
    let cov_rate = &s.sigma * s.sigma.transpose();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for p in 0..paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let mut x = problem.x0;
        let mut log_price = DVector::<f64>::zeros(n);
        let mut u = DVector::zeros(n);
        let cash = problem.x0 - benchmark.weights.sum();
        let (mut dynamic, mut bench) = (vec![x], vec![problem.x0]);
        for k in 0..steps {
            let t = k as f64 * dt;
            let xi = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let shock = &s.sigma * &xi * dt.sqrt();
            policy.control_into(t, x, &mut u);
            x += (s.r * x + s.excess_return().dot(&u)) * dt + u.dot(&shock);
            for i in 0..n {
                log_price[i] += (s.mu[i] - 0.5 * cov_rate[(i, i)]) * dt + shock[i];
            }
            let t1 = (k + 1) as f64 * dt;
            let held: f64 = (0..n).map(|i| benchmark.weights[i] * log_price[i].exp()).sum();
            dynamic.push(x);
            bench.push(cash * (s.r * t1).exp() + held);
        }
        columns.push(dynamic);
        columns.push(bench);
    }
    let mut header = vec!["t".to_string()];
    for p in 0..paths {
        header.push(format!("dynamic_{p}"));
        header.push(format!("benchmark_{p}"));
    }
    let rows = (0..=steps).map(|k| {
        let mut row = vec![k as f64 * dt];
        row.extend(columns.iter().map(|c| c[k]));
        row
    });
    crate::export::csv_table(&header, rows)
}
