//! Euler–Maruyama simulation of the closed-loop state equation
//!
//! ```text
//!     x_{k+1} = x_k + (A x_k + B'u_k) Δ + (x_k C' + u_k'D) √Δ ξ_k,   ξ_k ~ N(0, I_m)
//! ```
//!
//! Each path (or antithetic pair) draws from its own ChaCha8 stream keyed by
//! `(seed, path index)`, and paths are reduced in fixed-size chunks in index
//! order, so results are bit-identical for any thread count.

use std::borrow::Cow;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finite_horizon::{PiecewisePolicy, RiccatiSolution};
use crate::infinite_horizon::{StationaryProblem, StationarySolution};
use crate::problem::{Branch, Coefficients, ProblemData};

/// `|x|` above this marks a path as overflowed.
pub const OVERFLOW_LIMIT: f64 = 1e12;
/// Slack allowed in `H u <= d |x|`, scaled by `max(1, |x|)`.
pub const CONSTRAINT_SLACK: f64 = 1e-9;
const CHUNK_UNITS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("all {paths} paths overflowed (|x| > 1e12)")]
    NumericalOverflow { paths: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_paths: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Simulate paths in pairs driven by `ξ` and `-ξ`.
    pub antithetic: bool,
    /// Number of per-path state traces kept for export.
    pub trace_paths: usize,
    /// Initial state.
    pub x0: f64,
}

impl SimConfig {
    pub fn new(num_paths: usize, dt: f64, horizon: f64, seed: u64, x0: f64) -> Self {
        Self {
            num_paths,
            dt,
            horizon,
            seed,
            antithetic: false,
            trace_paths: 0,
            x0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.num_paths == 0 {
            return Err(SimError::Config("num_paths must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(SimError::Config("dt must be > 0".into()));
        }
        if !(self.horizon >= self.dt) {
            return Err(SimError::Config("horizon must be >= dt".into()));
        }
        if self.antithetic && self.num_paths % 2 == 1 {
            return Err(SimError::Config("antithetic sampling needs an even number of paths".into()));
        }
        if !self.x0.is_finite() {
            return Err(SimError::Config("x0 must be finite".into()));
        }
        Ok(())
    }

    /// Number of steps; the step is shrunk so that it divides the horizon.
    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn effective_dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    fn unit_size(&self) -> usize {
        if self.antithetic {
            2
        } else {
            1
        }
    }
}

/// Coefficients seen by the simulator.
pub trait SimModel: Sync {
    fn coefficients_at(&self, t: f64) -> Cow<'_, Coefficients>;
    /// Weight of `x(T)²` in the cost.
    fn terminal_weight(&self) -> f64;
    fn is_time_invariant(&self) -> bool;
}

impl SimModel for ProblemData {
    fn coefficients_at(&self, t: f64) -> Cow<'_, Coefficients> {
        self.at(t)
    }

    fn terminal_weight(&self) -> f64 {
        self.q_terminal
    }

    fn is_time_invariant(&self) -> bool {
        ProblemData::is_time_invariant(self)
    }
}

impl SimModel for StationaryProblem {
    fn coefficients_at(&self, _t: f64) -> Cow<'_, Coefficients> {
        Cow::Borrowed(&self.coefficients)
    }

    fn terminal_weight(&self) -> f64 {
        0.0
    }

    fn is_time_invariant(&self) -> bool {
        true
    }
}

/// A feedback law `u = π(t, x)`.
pub trait Policy: Sync {
    fn control_into(&self, t: f64, x: f64, u: &mut DVector<f64>);
}

impl Policy for PiecewisePolicy<'_> {
    fn control_into(&self, t: f64, x: f64, u: &mut DVector<f64>) {
        let branch = if x >= 0.0 { Branch::Hat } else { Branch::Bar };
        self.solution.gain_into(branch, t, u);
        *u *= x.abs();
    }
}

impl Policy for RiccatiSolution {
    fn control_into(&self, t: f64, x: f64, u: &mut DVector<f64>) {
        self.policy().control_into(t, x, u);
    }
}

impl Policy for StationarySolution {
    fn control_into(&self, _t: f64, x: f64, u: &mut DVector<f64>) {
        LinearPolicy {
            k_hat: &self.k_hat_star,
            k_bar: &self.k_bar_star,
        }
        .control_into(0.0, x, u);
    }
}

/// Constant gains: `K̂ x` for `x >= 0`, `-K̄ x` otherwise.
#[derive(Debug, Clone, Copy)]
pub struct LinearPolicy<'a> {
    pub k_hat: &'a DVector<f64>,
    pub k_bar: &'a DVector<f64>,
}

impl Policy for LinearPolicy<'_> {
    fn control_into(&self, _t: f64, x: f64, u: &mut DVector<f64>) {
        if x >= 0.0 {
            u.copy_from(self.k_hat);
        } else {
            u.copy_from(self.k_bar);
        }
        *u *= x.abs();
    }
}

/// `u = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn control_into(&self, _t: f64, _x: f64, u: &mut DVector<f64>) {
        u.fill(0.0);
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    /// Mean and standard error of independent samples.
    pub fn from_samples(samples: impl IntoIterator<Item = f64>) -> Self {
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for x in samples {
            n += 1;
            let delta = x - mean;
            mean += delta / n as f64;
            m2 += delta * (x - mean);
        }
        let std_error = if n > 1 {
            (m2 / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_error }
    }

    /// `|mean - target| <= k · std_error`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error
    }
}

/// Summary of a Monte Carlo run.
///
/// Per-path quantities are stored for kept paths in path order; states are
/// summarized by per-step moment sums. With antithetic sampling the
/// statistical unit is the pair, and both paths of a pair are dropped if
/// either overflows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub config: SimConfig,
    pub times: Vec<f64>,
    /// Per kept path: running cost plus terminal cost.
    pub cost_samples: Vec<f64>,
    /// Per kept path: `Σ_k u_k' R u_k Δ`.
    pub penalty_samples: Vec<f64>,
    pub terminal_states: Vec<f64>,
    /// Paths excluded because `|x|` exceeded the overflow limit.
    pub overflowed: usize,
    /// Controls that violated `H u <= d |x|` beyond the slack.
    pub constraint_violations: usize,
    /// State traces of the first `trace_paths` paths (overflowed ones included).
    pub traces: Vec<Vec<f64>>,
    unit_size: usize,
    units: usize,
    /// Per time: sums over units of unit means of `x`, `x²`, and their squares.
    sum_x: Vec<f64>,
    sum_x_sq: Vec<f64>,
    sum_x2: Vec<f64>,
    sum_x2_sq: Vec<f64>,
}

impl PathEnsemble {
    /// Number of statistical units kept (paths, or pairs when antithetic).
    pub fn kept_units(&self) -> usize {
        self.units
    }

    pub fn kept_paths(&self) -> usize {
        self.units * self.unit_size
    }

    fn unit_estimate(&self, per_path: &[f64]) -> Estimate {
        Estimate::from_samples(
            per_path
                .chunks_exact(self.unit_size)
                .map(|c| c.iter().sum::<f64>() / self.unit_size as f64),
        )
    }

    fn moment(&self, sum: &[f64], sum_sq: &[f64], i: usize) -> Estimate {
        let n = self.units as f64;
        let mean = sum[i] / n;
        let var = if self.units > 1 {
            ((sum_sq[i] - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            std_error: (var / n).sqrt(),
        }
    }

    /// `E[x(t_i)]`
    pub fn mean_state(&self, i: usize) -> Estimate {
        self.moment(&self.sum_x, &self.sum_x_sq, i)
    }

    /// `E[x(t_i)²]`
    pub fn second_moment(&self, i: usize) -> Estimate {
        self.moment(&self.sum_x2, &self.sum_x2_sq, i)
    }

    pub fn terminal_mean(&self) -> Estimate {
        self.unit_estimate(&self.terminal_states)
    }

    pub fn penalty(&self) -> Estimate {
        self.unit_estimate(&self.penalty_samples)
    }

    /// Sample variance of the terminal state over kept paths.
    pub fn terminal_variance(&self) -> f64 {
        let n = self.terminal_states.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.terminal_states.iter().sum::<f64>() / n as f64;
        self.terminal_states.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    }

    /// `t, mean_x, se_x, mean_x2, se_x2` per step.
    pub fn moments_csv(&self) -> String {
        let header = ["t", "mean_x", "se_x", "mean_x2", "se_x2"].map(String::from);
        let rows = (0..self.times.len()).map(|i| {
            let m1 = self.mean_state(i);
            let m2 = self.second_moment(i);
            [self.times[i], m1.mean, m1.std_error, m2.mean, m2.std_error]
        });
        crate::export::csv_table(&header, rows)
    }

    /// `t, path_0, path_1, ...` for the stored traces.
    pub fn traces_csv(&self) -> String {
        let mut header = vec!["t".to_string()];
        header.extend((0..self.traces.len()).map(|p| format!("path_{p}")));
        let rows = (0..self.times.len()).map(|i| {
            let mut row = vec![self.times[i]];
            row.extend(self.traces.iter().map(|tr| tr[i]));
            row
        });
        crate::export::csv_table(&header, rows)
    }
}

/// Sample mean and standard error of the per-path costs.
pub fn estimate_value(ensemble: &PathEnsemble) -> Estimate {
    ensemble.unit_estimate(&ensemble.cost_samples)
}

/// `x0² exp(N(K) t)`: exact `E[x(t)²]` under the constant gain `K` while the
/// state keeps one sign.
pub fn moment_ode(problem: &StationaryProblem, k: &DVector<f64>, branch: Branch, t: f64, x0: f64) -> f64 {
    x0 * x0 * (problem.n_value(k, branch) * t).exp()
}

/// Coefficients at one step, flattened row-major for the inner loop.
struct StepCoefficients {
    a: f64,
    b: Vec<f64>,
    c: Vec<f64>,
    /// `n x m`
    d: Vec<f64>,
    /// `n x n`
    r: Vec<f64>,
    s: Vec<f64>,
    q: f64,
    /// `k x n`
    h: Vec<f64>,
    bound: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl From<&Coefficients> for StepCoefficients {
    fn from(c: &Coefficients) -> Self {
        Self {
            a: c.a,
            b: c.b.as_slice().to_vec(),
            c: c.c.as_slice().to_vec(),
            d: row_major(&c.d),
            r: row_major(&c.r),
            s: c.s.as_slice().to_vec(),
            q: c.q,
            h: row_major(&c.region.h),
            bound: c.region.d.as_slice().to_vec(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Table {
    entries: Vec<StepCoefficients>,
}

impl Table {
    fn at(&self, k: usize) -> &StepCoefficients {
        if self.entries.len() == 1 {
            &self.entries[0]
        } else {
            &self.entries[k]
        }
    }
}

struct PathResult {
    cost: f64,
    penalty: f64,
    overflowed: bool,
    violations: usize,
}

struct Scratch {
    u: DVector<f64>,
    loading: Vec<f64>,
}

#[derive(Default)]
struct ChunkResult {
    sum_x: Vec<f64>,
    sum_x_sq: Vec<f64>,
    sum_x2: Vec<f64>,
    sum_x2_sq: Vec<f64>,
    units: usize,
    cost: Vec<f64>,
    penalty: Vec<f64>,
    terminal: Vec<f64>,
    overflowed: usize,
    violations: usize,
    traces: Vec<(usize, Vec<f64>)>,
}

struct Runner<'a, P: Policy + ?Sized> {
    table: Table,
    policy: &'a P,
    config: SimConfig,
    steps: usize,
    dt: f64,
    times: Vec<f64>,
    terminal_weight: f64,
    m: usize,
    n: usize,
}

impl<P: Policy + ?Sized> Runner<'_, P> {
    fn scratch(&self) -> Scratch {
        Scratch {
            u: DVector::zeros(self.n),
            loading: vec![0.0; self.m],
        }
    }

    /// One path; `sign` flips every Gaussian increment.
    fn path(&self, rng: &mut ChaCha8Rng, sign: f64, scratch: &mut Scratch, states: &mut Vec<f64>) -> PathResult {
        states.clear();
        let sqrt_dt = self.dt.sqrt();
        let mut x = self.config.x0;
        states.push(x);
        let (mut cost, mut penalty) = (0.0, 0.0);
        let mut overflowed = false;
        let mut violations = 0;
        for k in 0..self.steps {
            let t = self.times[k];
            let c = self.table.at(k);
            if overflowed {
                // Keep the RNG stream aligned with non-overflowed paths.
                for _ in 0..self.m {
                    let _: f64 = StandardNormal.sample(rng);
                }
                states.push(f64::NAN);
                continue;
            }
            self.policy.control_into(t, x, &mut scratch.u);
            let u = scratch.u.as_slice();
            let (n, m) = (self.n, self.m);
            if !c.bound.is_empty() {
                let slack = CONSTRAINT_SLACK * x.abs().max(1.0);
                let violated = c
                    .h
                    .chunks_exact(n)
                    .zip(&c.bound)
                    .any(|(row, d)| dot(row, u) > d * x.abs() + slack);
                if violated {
                    violations += 1;
                }
            }
            let upenalty: f64 = c.r.chunks_exact(n).zip(u).map(|(row, ui)| ui * dot(row, u)).sum();
            penalty += upenalty * self.dt;
            cost += (upenalty + 2.0 * x * dot(&c.s, u) + c.q * x * x) * self.dt;

            scratch.loading.iter_mut().for_each(|l| *l = 0.0);
            for (row, ui) in c.d.chunks_exact(m).zip(u) {
                for (l, dij) in scratch.loading.iter_mut().zip(row) {
                    *l += ui * dij;
                }
            }
            let mut noise = 0.0;
            for j in 0..m {
                let z: f64 = StandardNormal.sample(rng);
                noise += (x * c.c[j] + scratch.loading[j]) * sign * z;
            }
            x += (c.a * x + dot(&c.b, u)) * self.dt + noise * sqrt_dt;
            if !(x.abs() <= OVERFLOW_LIMIT) {
                overflowed = true;
                states.push(f64::NAN);
            } else {
                states.push(x);
            }
        }
        if !overflowed {
            cost += self.terminal_weight * x * x;
        }
        PathResult {
            cost,
            penalty,
            overflowed,
            violations,
        }
    }

    fn chunk(&self, first_unit: usize, last_unit: usize) -> ChunkResult {
        let len = self.steps + 1;
        let unit = self.config.unit_size();
        let mut out = ChunkResult {
            sum_x: vec![0.0; len],
            sum_x_sq: vec![0.0; len],
            sum_x2: vec![0.0; len],
            sum_x2_sq: vec![0.0; len],
            ..ChunkResult::default()
        };
        let mut scratch = self.scratch();
        let mut buffers: Vec<Vec<f64>> = (0..unit).map(|_| Vec::with_capacity(len)).collect();
        let mut results: Vec<PathResult> = Vec::with_capacity(unit);
        for u_idx in first_unit..last_unit {
            results.clear();
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(u_idx as u64);
            for (member, buf) in buffers.iter_mut().enumerate() {
                if member == 1 {
                    rng.set_stream(u_idx as u64);
                    rng.set_word_pos(0);
                }
                let sign = if member == 0 { 1.0 } else { -1.0 };
                results.push(self.path(&mut rng, sign, &mut scratch, buf));
            }
            for (member, res) in results.iter().enumerate() {
                let path_index = u_idx * unit + member;
                out.violations += res.violations;
                if path_index < self.config.trace_paths {
                    out.traces.push((path_index, buffers[member].clone()));
                }
            }
            if results.iter().any(|r| r.overflowed) {
                out.overflowed += unit;
                continue;
            }
            out.units += 1;
            let inv = 1.0 / unit as f64;
            for i in 0..len {
                let (mut m1, mut m2) = (0.0, 0.0);
                for buf in &buffers {
                    let x = buf[i];
                    m1 += x;
                    m2 += x * x;
                }
                m1 *= inv;
                m2 *= inv;
                out.sum_x[i] += m1;
                out.sum_x_sq[i] += m1 * m1;
                out.sum_x2[i] += m2;
                out.sum_x2_sq[i] += m2 * m2;
            }
            for (member, res) in results.iter().enumerate() {
                out.cost.push(res.cost);
                out.penalty.push(res.penalty);
                out.terminal.push(buffers[member][len - 1]);
            }
        }
        out
    }
}

/// Simulates `config.num_paths` closed-loop paths from `config.x0`.
pub fn simulate_paths<M, P>(model: &M, policy: &P, config: &SimConfig) -> Result<PathEnsemble, SimError>
where
    M: SimModel + ?Sized,
    P: Policy + ?Sized,
{
    config.validate()?;
    let steps = config.steps();
    let dt = config.effective_dt();
    let times: Vec<f64> = (0..=steps)
        .map(|k| if k == steps { config.horizon } else { k as f64 * dt })
        .collect();
    let table = if model.is_time_invariant() {
        Table { entries: vec![StepCoefficients::from(model.coefficients_at(0.0).as_ref())] }
    } else {
        Table {
            entries: times[..steps]
                .iter()
                .map(|&t| StepCoefficients::from(model.coefficients_at(t).as_ref()))
                .collect(),
        }
    };
    let first = model.coefficients_at(0.0);
    let runner = Runner {
        n: first.control_dim(),
        m: first.noise_dim(),
        table,
        policy,
        config: *config,
        steps,
        dt,
        times: times.clone(),
        terminal_weight: model.terminal_weight(),
    };

    let total_units = config.num_paths / config.unit_size();
    let chunk_bounds: Vec<(usize, usize)> = (0..total_units)
        .step_by(CHUNK_UNITS)
        .map(|s| (s, (s + CHUNK_UNITS).min(total_units)))
        .collect();
    let chunks: Vec<ChunkResult> = chunk_bounds
        .par_iter()
        .map(|&(a, b)| runner.chunk(a, b))
        .collect();

    let len = steps + 1;
    let mut ens = PathEnsemble {
        config: *config,
        times,
        cost_samples: Vec::new(),
        penalty_samples: Vec::new(),
        terminal_states: Vec::new(),
        overflowed: 0,
        constraint_violations: 0,
        traces: Vec::new(),
        unit_size: config.unit_size(),
        units: 0,
        sum_x: vec![0.0; len],
        sum_x_sq: vec![0.0; len],
        sum_x2: vec![0.0; len],
        sum_x2_sq: vec![0.0; len],
    };
    for c in chunks {
        for i in 0..len {
            ens.sum_x[i] += c.sum_x[i];
            ens.sum_x_sq[i] += c.sum_x_sq[i];
            ens.sum_x2[i] += c.sum_x2[i];
            ens.sum_x2_sq[i] += c.sum_x2_sq[i];
        }
        ens.units += c.units;
        ens.cost_samples.extend(c.cost);
        ens.penalty_samples.extend(c.penalty);
        ens.terminal_states.extend(c.terminal);
        ens.overflowed += c.overflowed;
        ens.constraint_violations += c.violations;
        ens.traces.extend(c.traces.into_iter().map(|(_, tr)| tr));
    }
    if ens.units == 0 {
        return Err(SimError::NumericalOverflow { paths: config.num_paths });
    }
    if ens.overflowed as f64 > 1e-3 * config.num_paths as f64 {
        warn!(
            "{} of {} paths overflowed (|x| > 1e12) and were excluded",
            ens.overflowed, config.num_paths
        );
    }
    if ens.constraint_violations > 0 {
        warn!("{} controls violated the state-scaled constraint", ens.constraint_violations);
    }
    Ok(ens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::Polyhedron;

    fn linear_model(a: f64, c: f64) -> StationaryProblem {
        StationaryProblem::new(Coefficients {
            a,
            b: DVector::from_element(1, 0.0),
            c: DVector::from_element(1, c),
            d: DMatrix::from_element(1, 1, 1.0),
            r: DMatrix::from_element(1, 1, 1.0),
            s: DVector::zeros(1),
            q: 1.0,
            region: Polyhedron::unconstrained(1),
        })
    }

    #[test]
    fn deterministic_growth_without_noise() {
        let model = linear_model(0.7, 0.0);
        let cfg = SimConfig::new(3, 1e-3, 1.0, 1, 2.0);
        let ens = simulate_paths(&model, &ZeroPolicy, &cfg).unwrap();
        // Oracle: the Euler recursion x_{k+1} = (1 + aΔ) x_k in closed form.
        let expect = 2.0 * (1.0 + 0.7e-3f64).powi(1000);
        assert!((ens.terminal_mean().mean - expect).abs() < 1e-12);
        assert!((expect - 2.0 * 0.7f64.exp()).abs() < 2e-3);
        assert_eq!(ens.terminal_mean().std_error, 0.0);
    }

    #[test]
    fn zero_start_stays_zero() {
        let model = linear_model(0.3, 1.5);
        let k = DVector::from_element(1, 0.4);
        let policy = LinearPolicy { k_hat: &k, k_bar: &k };
        let ens = simulate_paths(&model, &policy, &SimConfig::new(10, 1e-2, 1.0, 9, 0.0)).unwrap();
        assert!(ens.cost_samples.iter().all(|&c| c == 0.0));
        assert!(ens.terminal_states.iter().all(|&x| x == 0.0));
        assert_eq!(estimate_value(&ens), Estimate { mean: 0.0, std_error: 0.0 });
    }

    #[test]
    fn seeded_runs_are_identical() {
        let model = linear_model(-0.2, 0.8);
        let mut cfg = SimConfig::new(300, 1e-2, 0.5, 77, 1.0);
        cfg.trace_paths = 5;
        let a = simulate_paths(&model, &ZeroPolicy, &cfg).unwrap();
        let b = simulate_paths(&model, &ZeroPolicy, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.traces.len(), 5);
        cfg.seed = 78;
        let c = simulate_paths(&model, &ZeroPolicy, &cfg).unwrap();
        assert_ne!(a.cost_samples, c.cost_samples);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let model = linear_model(-0.2, 0.8);
        let cfg = SimConfig::new(500, 1e-2, 0.5, 3, 1.0);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| simulate_paths(&model, &ZeroPolicy, &cfg).unwrap());
        let b = three.install(|| simulate_paths(&model, &ZeroPolicy, &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn single_path_estimate_has_zero_error() {
        let model = linear_model(-0.2, 0.8);
        let ens = simulate_paths(&model, &ZeroPolicy, &SimConfig::new(1, 1e-2, 0.5, 3, 1.0)).unwrap();
        let est = estimate_value(&ens);
        assert_eq!(est.mean, ens.cost_samples[0]);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn geometric_second_moment_matches_discrete_oracle() {
        // Oracle: E[x_{k+1}²] = ((1 + aΔ)² + c²Δ) E[x_k²] for the EM recursion.
        let (a, c, dt) = (-0.5, 0.6, 1e-2);
        let model = linear_model(a, c);
        let ens = simulate_paths(&model, &ZeroPolicy, &SimConfig::new(20_000, dt, 1.0, 5, 1.0)).unwrap();
        let oracle = ((1.0 + a * dt).powi(2) + c * c * dt).powi(100);
        assert!(ens.second_moment(100).within(oracle, 4.0), "{:?} vs {oracle}", ens.second_moment(100));
    }

    #[test]
    fn antithetic_pairs_cut_the_error() {
        // B = 0 and small noise: x(T) is close to linear in the increments.
        let model = linear_model(-0.3, 0.3);
        let mut cfg = SimConfig::new(4000, 1e-2, 1.0, 11, 1.0);
        let plain = simulate_paths(&model, &ZeroPolicy, &cfg).unwrap();
        cfg.antithetic = true;
        let anti = simulate_paths(&model, &ZeroPolicy, &cfg).unwrap();
        assert!(anti.terminal_mean().std_error <= 0.5 * plain.terminal_mean().std_error);
    }

    #[test]
    fn overflowing_paths_are_excluded() {
        let model = linear_model(60.0, 0.0);
        let ens = simulate_paths(&model, &ZeroPolicy, &SimConfig::new(2, 1e-2, 1.0, 1, 1.0));
        assert!(matches!(ens, Err(SimError::NumericalOverflow { paths: 2 })));
    }

    #[test]
    fn moment_ode_at_zero_and_without_feedback() {
        let model = linear_model(0.4, 0.0);
        let k = DVector::zeros(1);
        assert_eq!(moment_ode(&model, &k, Branch::Hat, 0.0, 3.0), 9.0);
        let v = moment_ode(&model, &k, Branch::Bar, 2.0, 3.0);
        assert!((v - 9.0 * (0.8f64 * 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::new(0, 1e-2, 1.0, 0, 1.0).validate().is_err());
        assert!(SimConfig::new(1, 0.0, 1.0, 0, 1.0).validate().is_err());
        assert!(SimConfig::new(1, 2.0, 1.0, 0, 1.0).validate().is_err());
        let mut odd = SimConfig::new(3, 1e-2, 1.0, 0, 1.0);
        odd.antithetic = true;
        assert!(odd.validate().is_err());
        assert_eq!(SimConfig::new(1, 0.3, 1.0, 0, 1.0).steps(), 4);
        assert_eq!(SimConfig::new(1, 1e-4, 0.1, 0, 1.0).steps(), 1000);
    }
}
