//! Python bindings for `conlq`.
//!
//! Configs are passed as file paths; vectors and matrices travel as lists
//! (row-major lists of lists for matrices).

use std::path::PathBuf;

use conlq::config::{parse_config, Problem};
use conlq::finite_horizon::{solve_riccati_pair, value_function, RiccatiOptions, RiccatiSolution};
use conlq::infinite_horizon::{
    solve_stationary as solve_stationary_core, stationary_value, StationaryOptions, StationaryOutcome,
    StationarySolution,
};
use conlq::meanvar::{solve_mv as solve_mv_core, MvSolution};
use conlq::qp::{solve_qp as solve_qp_core, Polyhedron, QpOptions, QpProblem};
use conlq::simulate::{estimate_value, simulate_paths, SimConfig};
use conlq::Branch;
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(pyconlq, ConlqError, PyException, "A solver or configuration error.");
create_exception!(pyconlq, NoSolutionError, ConlqError, "The stationary equations have no root.");

fn err(e: impl std::fmt::Display) -> PyErr {
    ConlqError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>], cols: usize) -> PyResult<DMatrix<f64>> {
    if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
        return Err(err(format!("row {bad} has {} entries, expected {cols}", rows[bad].len())));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn list(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

fn branch_of(x: f64) -> Branch {
    if x >= 0.0 {
        Branch::Hat
    } else {
        Branch::Bar
    }
}

fn load(path: PathBuf, steps: Option<usize>) -> PyResult<Problem> {
    parse_config(&path, steps).map(|p| p.problem).map_err(err)
}

/// Minimizer of `K'ΩK + 2w'K` subject to `HK <= d`.
#[pyclass(frozen, module = "pyconlq")]
struct QpResult {
    #[pyo3(get)]
    k: Vec<f64>,
    #[pyo3(get)]
    value: f64,
    #[pyo3(get)]
    multipliers: Vec<f64>,
    #[pyo3(get)]
    active_set: Vec<usize>,
}

#[pymethods]
impl QpResult {
    fn __repr__(&self) -> String {
        format!("QpResult(k={:?}, value={})", self.k, self.value)
    }
}

#[pyfunction]
#[pyo3(signature = (omega, w, h=None, d=None))]
fn solve_qp(omega: Vec<Vec<f64>>, w: Vec<f64>, h: Option<Vec<Vec<f64>>>, d: Option<Vec<f64>>) -> PyResult<QpResult> {
    let n = w.len();
    let region = match (h, d) {
        (Some(h), Some(d)) => Polyhedron::new(matrix(&h, n)?, DVector::from_vec(d)).map_err(err)?,
        (None, None) => Polyhedron::unconstrained(n),
        _ => return Err(err("h and d must be given together")),
    };
    let problem = QpProblem::new(matrix(&omega, n)?, DVector::from_vec(w), region).map_err(err)?;
    let sol = solve_qp_core(&problem, &QpOptions::default(), None).map_err(err)?;
    Ok(QpResult {
        k: list(&sol.k_star),
        value: sol.value,
        multipliers: list(&sol.multipliers),
        active_set: sol.active_set,
    })
}

/// Gain schedule of a finite-horizon problem.
#[pyclass(frozen, module = "pyconlq")]
struct FiniteSolution {
    inner: RiccatiSolution,
}

#[pymethods]
impl FiniteSolution {
    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.inner.grid.clone()
    }

    #[getter]
    fn g_hat(&self) -> Vec<f64> {
        self.inner.g_hat.clone()
    }

    #[getter]
    fn g_bar(&self) -> Vec<f64> {
        self.inner.g_bar.clone()
    }

    #[getter]
    fn subdivided_steps(&self) -> usize {
        self.inner.subdivided_steps
    }

    /// Optimal cost-to-go `x² G(t)` with the branch picked by the sign of `x`.
    fn value(&self, t: f64, x: f64) -> PyResult<f64> {
        value_function(&self.inner, t, x).map_err(err)
    }

    /// Optimal control `u*(t, x)`.
    fn control(&self, t: f64, x: f64) -> PyResult<Vec<f64>> {
        self.inner.policy().evaluate(t, x).map(|u| list(&u)).map_err(err)
    }

    /// Gain of one branch (`"hat"` or `"bar"`) at time `t`.
    fn gain(&self, branch: &str, t: f64) -> PyResult<Vec<f64>> {
        let branch = match branch {
            "hat" => Branch::Hat,
            "bar" => Branch::Bar,
            other => return Err(err(format!("branch must be \"hat\" or \"bar\", got {other:?}"))),
        };
        self.inner.gain_at(branch, t).map(|k| list(&k)).map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (config, steps=None))]
fn solve_finite(config: PathBuf, steps: Option<usize>) -> PyResult<FiniteSolution> {
    let Problem::Finite(data) = load(config, steps)? else {
        return Err(err("expected a config with kind \"finite\""));
    };
    let inner = solve_riccati_pair(&data, &RiccatiOptions::default()).map_err(err)?;
    Ok(FiniteSolution { inner })
}

#[pyclass(frozen, module = "pyconlq")]
struct Stationary {
    inner: StationarySolution,
}

#[pymethods]
impl Stationary {
    #[getter]
    fn g_hat(&self) -> f64 {
        self.inner.g_hat_star
    }

    #[getter]
    fn g_bar(&self) -> f64 {
        self.inner.g_bar_star
    }

    #[getter]
    fn k_hat(&self) -> Vec<f64> {
        list(&self.inner.k_hat_star)
    }

    #[getter]
    fn k_bar(&self) -> Vec<f64> {
        list(&self.inner.k_bar_star)
    }

    #[getter]
    fn n_hat(&self) -> f64 {
        self.inner.n_hat
    }

    #[getter]
    fn n_bar(&self) -> f64 {
        self.inner.n_bar
    }

    fn value(&self, x0: f64) -> f64 {
        stationary_value(&self.inner, x0)
    }

    fn __repr__(&self) -> String {
        format!("Stationary(g_hat={}, g_bar={})", self.inner.g_hat_star, self.inner.g_bar_star)
    }
}

/// Raises `NoSolutionError` when either algebraic equation has no root.
#[pyfunction]
fn solve_stationary(config: PathBuf) -> PyResult<Stationary> {
    let Problem::Stationary(p) = load(config, None)? else {
        return Err(err("expected a config with kind \"stationary\""));
    };
    match solve_stationary_core(&p, &StationaryOptions::default()).map_err(err)? {
        StationaryOutcome::Solved(inner) => Ok(Stationary { inner }),
        StationaryOutcome::NoSolution(report) => {
            let messages: Vec<String> = [&report.hat, &report.bar]
                .into_iter()
                .filter(|f| f.root.is_none())
                .map(|f| format!("{}: {}", f.branch.name(), f.message))
                .collect();
            Err(NoSolutionError::new_err(messages.join("; ")))
        }
    }
}

#[pyclass(frozen, module = "pyconlq")]
struct MeanVariance {
    inner: MvSolution,
    riskless_target: f64,
}

#[pymethods]
impl MeanVariance {
    #[getter]
    fn lambda_star(&self) -> f64 {
        self.inner.lambda_star
    }

    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.inner.grid().to_vec()
    }

    #[getter]
    fn rho(&self) -> Vec<f64> {
        self.inner.rho.clone()
    }

    #[getter]
    fn g_hat(&self) -> Vec<f64> {
        self.inner.g_hat_mv().to_vec()
    }

    #[getter]
    fn g_bar(&self) -> Vec<f64> {
        self.inner.g_bar_mv().to_vec()
    }

    /// Smallest attainable target, reached by the riskless strategy.
    #[getter]
    fn riskless_target(&self) -> f64 {
        self.riskless_target
    }

    /// Multiplier for another target on the same market.
    fn lambda_for(&self, target: f64) -> PyResult<f64> {
        self.inner.lambda_for(target).map_err(err)
    }

    /// Frontier variance before the control-penalty correction.
    fn frontier_first_term(&self, target: f64) -> f64 {
        self.inner.frontier_first_term(target)
    }
}

#[pyfunction]
#[pyo3(signature = (config, steps=None))]
fn solve_mv(config: PathBuf, steps: Option<usize>) -> PyResult<MeanVariance> {
    let Problem::MeanVariance(p) = load(config, steps)? else {
        return Err(err("expected a config with kind \"mean_variance\""));
    };
    let inner = solve_mv_core(&p, &RiccatiOptions::default()).map_err(err)?;
    Ok(MeanVariance {
        inner,
        riskless_target: p.riskless_target(),
    })
}

#[pyclass(frozen, module = "pyconlq")]
struct SimulationResult {
    #[pyo3(get)]
    value: f64,
    #[pyo3(get)]
    std_error: f64,
    /// `x0² G(0)` of the branch selected by the sign of `x0`.
    #[pyo3(get)]
    analytic_value: f64,
    #[pyo3(get)]
    times: Vec<f64>,
    /// Monte Carlo `E[x(t)²]` on `times`.
    #[pyo3(get)]
    second_moment: Vec<f64>,
    #[pyo3(get)]
    kept_paths: usize,
}

#[pymethods]
impl SimulationResult {
    fn __repr__(&self) -> String {
        format!(
            "SimulationResult(value={}, std_error={}, analytic_value={})",
            self.value, self.std_error, self.analytic_value
        )
    }
}

/// Monte Carlo rollout of the optimal policy of a finite or stationary config.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (config, x0=1.0, paths=10_000, seed=42, dt=None, horizon=None, antithetic=false))]
fn simulate(
    py: Python<'_>,
    config: PathBuf,
    x0: f64,
    paths: usize,
    seed: u64,
    dt: Option<f64>,
    horizon: Option<f64>,
    antithetic: bool,
) -> PyResult<SimulationResult> {
    let problem = load(config, None)?;
    let make = |default_horizon: f64| -> PyResult<SimConfig> {
        let horizon = horizon.unwrap_or(default_horizon);
        let mut cfg = SimConfig::new(paths, dt.unwrap_or(horizon / 1000.0), horizon, seed, x0);
        cfg.antithetic = antithetic;
        cfg.validate().map_err(err)?;
        Ok(cfg)
    };
    let (ens, analytic_value) = py.detach(|| -> PyResult<_> {
        match &problem {
            Problem::Finite(data) => {
                let sol = solve_riccati_pair(data, &RiccatiOptions::default()).map_err(err)?;
                let ens = simulate_paths(data, &sol, &make(data.horizon())?).map_err(err)?;
                let g0 = match branch_of(x0) {
                    Branch::Hat => sol.g_hat[0],
                    Branch::Bar => sol.g_bar[0],
                };
                Ok((ens, x0 * x0 * g0))
            }
            Problem::Stationary(p) => {
                let StationaryOutcome::Solved(sol) =
                    solve_stationary_core(p, &StationaryOptions::default()).map_err(err)?
                else {
                    return Err(NoSolutionError::new_err("the stationary problem has no solution"));
                };
                let ens = simulate_paths(p, &sol, &make(2.0)?).map_err(err)?;
                Ok((ens, stationary_value(&sol, x0)))
            }
            Problem::MeanVariance(_) => Err(err("expected a finite or stationary config")),
        }
    })?;
    let value = estimate_value(&ens);
    Ok(SimulationResult {
        value: value.mean,
        std_error: value.std_error,
        analytic_value,
        second_moment: (0..ens.times.len()).map(|i| ens.second_moment(i).mean).collect(),
        times: ens.times.clone(),
        kept_paths: ens.kept_paths(),
    })
}

#[pymodule]
fn pyconlq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConlqError", m.py().get_type::<ConlqError>())?;
    m.add("NoSolutionError", m.py().get_type::<NoSolutionError>())?;
    m.add_class::<QpResult>()?;
    m.add_class::<FiniteSolution>()?;
    m.add_class::<Stationary>()?;
    m.add_class::<MeanVariance>()?;
    m.add_class::<SimulationResult>()?;
    m.add_function(wrap_pyfunction!(solve_qp, m)?)?;
    m.add_function(wrap_pyfunction!(solve_finite, m)?)?;
    m.add_function(wrap_pyfunction!(solve_stationary, m)?)?;
    m.add_function(wrap_pyfunction!(solve_mv, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
