//! Stationary gains for the infinite-horizon problem.
//!
//! The algebraic pair is `F̂(Ĝ) = 0`, `F̄(Ḡ) = 0` with
//! `F(G) = -G C'C - 2GA - q - min_{HK <= d} f(K, G)`. Roots are found by
//! Newton iteration with a central-difference slope and a bisection
//! safeguard; when Newton fails, `F` is scanned on a log grid over
//! `(0, g_max]` to locate a sign change or to certify that none exists.

use log::{debug, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finite_horizon::{solve_riccati_pair, RiccatiError, RiccatiOptions};
use crate::linalg::serde_dense;
use crate::problem::{default_steps, Assumption, Branch, Coefficients, ProblemData, ValidationError};
use crate::qp::{self, QpError, QpOptions};
use crate::roots::{self, Root, RootFailure, RootOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StationaryError {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("initial guess from the finite-horizon solver failed: {0}")]
    InitialGuess(#[from] RiccatiError),
    #[error("{branch} branch: sign change bracketed but no root within {iterations} iterations (|F| = {residual:.3e})")]
    MaxIterations {
        branch: &'static str,
        iterations: usize,
        residual: f64,
    },
}

/// Constant data `A, B, C, D, R, S, q` and a constant constraint set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryProblem {
    pub coefficients: Coefficients,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryOptions {
    pub qp: QpOptions,
    pub root_tolerance: f64,
    pub max_iterations: usize,
    pub g_max: f64,
    /// Points of the log-spaced fallback scan.
    pub scan_points: usize,
    /// Smallest `g` of the fallback scan.
    pub scan_min: f64,
}

impl Default for StationaryOptions {
    fn default() -> Self {
        Self {
            qp: QpOptions::default(),
            root_tolerance: 1e-9,
            max_iterations: 100,
            g_max: 1e6,
            scan_points: 241,
            scan_min: 1e-6,
        }
    }
}

impl StationaryOptions {
    fn roots(&self) -> RootOptions {
        RootOptions {
            tolerance: self.root_tolerance,
            max_iterations: self.max_iterations,
            lower: 0.0,
            upper: self.g_max,
        }
    }
}

/// Values of `F̂` and `F̄` on a grid of `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanProfile {
    pub g: Vec<f64>,
    pub f_hat: Vec<f64>,
    pub f_bar: Vec<f64>,
}

impl ScanProfile {
    pub fn values(&self, branch: Branch) -> &[f64] {
        match branch {
            Branch::Hat => &self.f_hat,
            Branch::Bar => &self.f_bar,
        }
    }

    /// Consecutive scan points `(g_lo, g_hi)` where `F` changes sign.
    pub fn first_sign_change(&self, branch: Branch) -> Option<(f64, f64)> {
        let f = self.values(branch);
        (1..f.len())
            .find(|&i| (f[i - 1] <= 0.0) != (f[i] <= 0.0))
            .map(|i| (self.g[i - 1], self.g[i]))
    }

    pub fn to_csv(&self) -> String {
        let header = ["g", "f_hat", "f_bar"].map(String::from);
        let rows = (0..self.g.len()).map(|i| vec![self.g[i], self.f_hat[i], self.f_bar[i]]);
        crate::export::csv_table(&header, rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFailure {
    pub branch: Branch,
    /// Root of this branch when one was found (the other branch failed).
    pub root: Option<f64>,
    pub message: String,
}

/// Produced when `F̂` or `F̄` has no root on `(0, g_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoSolutionReport {
    pub hat: BranchFailure,
    pub bar: BranchFailure,
    pub scan: ScanProfile,
}

impl NoSolutionReport {
    pub fn both_failed(&self) -> bool {
        self.hat.root.is_none() && self.bar.root.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarySolution {
    pub g_hat_star: f64,
    pub g_bar_star: f64,
    #[serde(with = "serde_dense::vector")]
    pub k_hat_star: DVector<f64>,
    #[serde(with = "serde_dense::vector")]
    pub k_bar_star: DVector<f64>,
    /// `N̂(K̂*)`; negative certifies mean-square decay on `x >= 0`.
    pub n_hat: f64,
    /// `N̄(K̄*)`; negative certifies mean-square decay on `x < 0`.
    pub n_bar: f64,
    pub iterations: [usize; 2],
    /// `|F̂(Ĝ*)|`, `|F̄(Ḡ*)|`
    pub residuals: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub enum StationaryOutcome {
    Solved(StationarySolution),
    NoSolution(NoSolutionReport),
}

impl StationaryProblem {
    pub fn new(coefficients: Coefficients) -> Self {
        Self { coefficients }
    }

    /// Shapes, strict convexity and nonemptiness of the constraint set.
    /// An empty `{HK <= d, HK <= 0}` is reported as a warning.
    pub fn validate(&self) -> Result<Vec<String>, ValidationError> {
        let c = &self.coefficients;
        c.check_shapes()
            .map_err(|e| ValidationError::new(Assumption::Structure, None, e))?;
        c.check_convexity(true)
            .map_err(|e| ValidationError::new(Assumption::StrictConvexity, None, e))?;
        let rep = qp::check_feasibility(&c.region);
        if !rep.feasible {
            return Err(ValidationError::new(
                Assumption::StationaryFeasibility,
                None,
                format!("{{K : H K <= d}} is empty (phase-one violation {:.3e})", rep.max_violation),
            ));
        }
        let mut warnings = Vec::new();
        if !rep.cone_feasible {
            warnings.push(format!(
                "{}: {{K : H K <= d, H K <= 0}} is empty",
                Assumption::StationaryFeasibility.label()
            ));
        }
        Ok(warnings)
    }

    /// `F̂(g)` or `F̄(g)` together with the inner minimizer.
    pub fn eval_f_with_gain(
        &self,
        g: f64,
        branch: Branch,
        options: &QpOptions,
    ) -> Result<(f64, DVector<f64>), QpError> {
        let (f, sol) = self.coefficients.riccati_rhs(g, branch, options, None)?;
        Ok((f, sol.k_star))
    }

    pub fn eval_f(&self, g: f64, branch: Branch, options: &QpOptions) -> Result<f64, QpError> {
        Ok(self.eval_f_with_gain(g, branch, options)?.0)
    }

    /// `N(K) = 2A + C'C ± 2(B + DC)'K + K'DD'K`, minus sign for the bar branch.
    pub fn n_value(&self, k: &DVector<f64>, branch: Branch) -> f64 {
        let c = &self.coefficients;
        let loading = c.d.transpose() * k;
        2.0 * c.a + c.c.dot(&c.c) + 2.0 * branch.sign() * (&c.b + &c.d * &c.c).dot(k) + loading.dot(&loading)
    }

    /// `F̂` and `F̄` on the given points.
    pub fn scan(&self, g: &[f64], options: &QpOptions) -> Result<ScanProfile, QpError> {
        let eval = |branch| -> Result<Vec<f64>, QpError> {
            g.iter().map(|&x| self.eval_f(x, branch, options)).collect()
        };
        let (f_hat, f_bar) = rayon::join(|| eval(Branch::Hat), || eval(Branch::Bar));
        Ok(ScanProfile {
            g: g.to_vec(),
            f_hat: f_hat?,
            f_bar: f_bar?,
        })
    }

    /// Root of the unconstrained algebraic Riccati equation, if it has one in `(0, g_max]`.
    pub fn unconstrained_root(&self, options: &StationaryOptions) -> Option<f64> {
        let f = |g: f64| self.coefficients.unconstrained_rhs(g).ok_or(());
        match roots::newton_bracketed(f, 1.0, &options.roots()) {
            Ok(Ok(root)) if root.x > 0.0 => Some(root.x),
            _ => None,
        }
    }

    fn initial_guess(&self, options: &StationaryOptions) -> Result<(f64, f64), StationaryError> {
        if let Some(g) = self.unconstrained_root(options) {
            debug!("initial guess from the unconstrained root: {g}");
            return Ok((g, g));
        }
        let horizon = if self.coefficients.a == 0.0 {
            50.0
        } else {
            (5.0 / self.coefficients.a.abs() + 1.0).min(500.0)
        };
        let data = ProblemData::constant(self.coefficients.clone(), horizon, default_steps(horizon), 0.0);
        let sol = solve_riccati_pair(&data, &RiccatiOptions { qp: options.qp, ..RiccatiOptions::default() })?;
        debug!("initial guess from the finite-horizon pair on T = {horizon}");
        Ok((sol.g_hat[0].max(options.scan_min), sol.g_bar[0].max(options.scan_min)))
    }

    fn root_for(
        &self,
        branch: Branch,
        guess: f64,
        options: &StationaryOptions,
        scan: &mut Option<ScanProfile>,
    ) -> Result<Result<Root, String>, StationaryError> {
        let f = |g: f64| self.eval_f(g, branch, &options.qp);
        match roots::newton_bracketed(f, guess, &options.roots())? {
            Ok(root) => return Ok(Ok(root)),
            Err(failure) => debug!("{} branch: Newton failed ({failure:?}), scanning", branch.name()),
        }
        if scan.is_none() {
            *scan = Some(self.scan(&log_grid(options.scan_min, options.g_max, options.scan_points), &options.qp)?);
        }
        let profile = scan.as_ref().expect("scan computed above");
        let Some((lo, hi)) = profile.first_sign_change(branch) else {
            let values = profile.values(branch);
            let sign = if values.iter().all(|&v| v < 0.0) { "negative" } else { "positive" };
            return Ok(Err(format!(
                "F has no sign change on [{:.1e}, {:.1e}] (F {sign} throughout the scan)",
                options.scan_min, options.g_max
            )));
        };
        match roots::bisect(|g| self.eval_f(g, branch, &options.qp), lo, hi, &options.roots())? {
            Ok(root) => Ok(Ok(root)),
            Err(RootFailure::NoConvergence { last_fx, iterations, .. })
            | Err(RootFailure::LeftDomain { last_fx, iterations, .. }) => Err(StationaryError::MaxIterations {
                branch: branch.name(),
                iterations,
                residual: last_fx.abs(),
            }),
        }
    }
}

/// `n` points spaced evenly in `log g` from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// Solves both algebraic equations and certifies the stationary gains.
pub fn solve_stationary(
    problem: &StationaryProblem,
    options: &StationaryOptions,
) -> Result<StationaryOutcome, StationaryError> {
    let (guess_hat, guess_bar) = problem.initial_guess(options)?;
    let mut scan = None;
    let hat = problem.root_for(Branch::Hat, guess_hat, options, &mut scan)?;
    let bar = problem.root_for(Branch::Bar, guess_bar, options, &mut scan)?;

    let (hat, bar) = match (hat, bar) {
        (Ok(h), Ok(b)) => (h, b),
        (hat, bar) => {
            let scan = match scan {
                Some(s) => s,
                None => problem.scan(&log_grid(options.scan_min, options.g_max, options.scan_points), &options.qp)?,
            };
            let failure = |branch, res: Result<Root, String>| match res {
                Ok(root) => BranchFailure { branch, root: Some(root.x), message: "root found".into() },
                Err(message) => BranchFailure { branch, root: None, message },
            };
            return Ok(StationaryOutcome::NoSolution(NoSolutionReport {
                hat: failure(Branch::Hat, hat),
                bar: failure(Branch::Bar, bar),
                scan,
            }));
        }
    };

    let (f_hat, k_hat) = problem.eval_f_with_gain(hat.x, Branch::Hat, &options.qp)?;
    let (f_bar, k_bar) = problem.eval_f_with_gain(bar.x, Branch::Bar, &options.qp)?;
    let n_hat = problem.n_value(&k_hat, Branch::Hat);
    let n_bar = problem.n_value(&k_bar, Branch::Bar);
    if n_hat >= 0.0 || n_bar >= 0.0 {
        warn!("stationary gains are not mean-square stabilizing (N̂ = {n_hat:.4e}, N̄ = {n_bar:.4e})");
    }
    Ok(StationaryOutcome::Solved(StationarySolution {
        g_hat_star: hat.x,
        g_bar_star: bar.x,
        k_hat_star: k_hat,
        k_bar_star: k_bar,
        n_hat,
        n_bar,
        iterations: [hat.iterations, bar.iterations],
        residuals: [f_hat.abs(), f_bar.abs()],
    }))
}

/// `K̂* x` for `x >= 0`, `-K̄* x` otherwise.
pub fn stationary_policy(sol: &StationarySolution, x: f64) -> DVector<f64> {
    if x >= 0.0 {
        &sol.k_hat_star * x
    } else {
        &sol.k_bar_star * (-x)
    }
}

/// `x0² Ĝ*` for `x0 >= 0`, `x0² Ḡ*` otherwise.
pub fn stationary_value(sol: &StationarySolution, x0: f64) -> f64 {
    x0 * x0 * if x0 >= 0.0 { sol.g_hat_star } else { sol.g_bar_star }
}
