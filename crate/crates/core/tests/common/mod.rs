//! Random instance generators and independent reference solvers shared by
//! the integration tests.

#![allow(dead_code)]

use conlq::problem::{Coefficients, ProblemData};
use conlq::qp::{Polyhedron, QpProblem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn uniform_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// `M M' + floor I` with entries of `M` in `(-scale, scale)`.
pub fn spd(rng: &mut ChaCha8Rng, n: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let m = uniform_matrix(rng, n, n, scale);
    &m * m.transpose() + DMatrix::identity(n, n) * floor
}

/// `k` random half-spaces that all contain a random point of norm at most `radius`.
pub fn random_region(rng: &mut ChaCha8Rng, n: usize, k: usize, radius: f64) -> Polyhedron {
    let h = uniform_matrix(rng, k, n, 1.0);
    let inside = uniform_vector(rng, n, radius);
    let slack = DVector::from_fn(k, |_, _| rng.random_range(0.0..0.5));
    let d = &h * inside + slack;
    Polyhedron::new(h, d).unwrap()
}

/// Random half-spaces with `d >= 0`, so that `0` is feasible.
pub fn random_region_with_origin(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Polyhedron {
    let h = uniform_matrix(rng, k, n, 1.0);
    let d = DVector::from_fn(k, |_, _| rng.random_range(0.0..0.6));
    Polyhedron::new(h, d).unwrap()
}

pub fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let n = rng.random_range(1..=3);
    let k = rng.random_range(0..=6);
    let omega = spd(rng, n, 1.2, 0.1);
    let w = uniform_vector(rng, n, 2.0);
    QpProblem::new(omega, w, random_region(rng, n, k, 1.0)).unwrap()
}

/// Every subset of at most `n` rows is tried as the active set; the best
/// candidate satisfying primal and dual feasibility is the minimizer.
pub fn enumerate_qp(problem: &QpProblem) -> (DVector<f64>, f64) {
    let n = problem.dim();
    let region = &problem.region;
    let k = region.rows();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << k) {
        let rows: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        if rows.len() > n {
            continue;
        }
        let size = n + rows.len();
        let mut kkt = DMatrix::zeros(size, size);
        let mut rhs = DVector::zeros(size);
        kkt.view_mut((0, 0), (n, n)).copy_from(&(&problem.omega * 2.0));
        rhs.rows_mut(0, n).copy_from(&(&problem.w * -2.0));
        for (slot, &i) in rows.iter().enumerate() {
            for j in 0..n {
                kkt[(n + slot, j)] = region.h[(i, j)];
                kkt[(j, n + slot)] = region.h[(i, j)];
            }
            rhs[n + slot] = region.d[i];
        }
        let lu = kkt.full_piv_lu();
        if !lu.is_invertible() {
            continue;
        }
        let Some(sol) = lu.solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let mu_ok = sol.rows(n, rows.len()).iter().all(|&m| m >= -1e-9);
        if !mu_ok || region.max_violation(&x) > 1e-9 {
            continue;
        }
        let value = problem.objective(&x);
        if best.as_ref().is_none_or(|(_, v)| value < *v) {
            best = Some((x, value));
        }
    }
    best.expect("a feasible strictly convex QP has a minimizer")
}

/// Smallest objective over feasible points of the cube `center ± half_width`
/// sampled with the given step.
pub fn grid_min(problem: &QpProblem, center: &DVector<f64>, half_width: f64, step: f64) -> Option<f64> {
    let n = problem.dim();
    let per_axis = (2.0 * half_width / step).round() as usize + 1;
    let total = per_axis.pow(n as u32);
    let mut point = DVector::zeros(n);
    let mut best: Option<f64> = None;
    for idx in 0..total {
        let mut rest = idx;
        for j in 0..n {
            point[j] = center[j] - half_width + step * (rest % per_axis) as f64;
            rest /= per_axis;
        }
        if problem.region.max_violation(&point) <= 0.0 {
            let v = problem.objective(&point);
            if best.is_none_or(|b| v < b) {
                best = Some(v);
            }
        }
    }
    best
}

/// Coefficients satisfying the convexity assumptions: `R` positive definite,
/// `[[q, S'], [S, R]]` positive semidefinite and `q >= 0`.
pub fn random_coefficients(rng: &mut ChaCha8Rng, n: usize, m: usize, region: Polyhedron) -> Coefficients {
    let r = spd(rng, n, 0.8, 0.3);
    let s = uniform_vector(rng, n, 0.4);
    let chol = r.clone().cholesky().unwrap();
    let q = s.dot(&chol.solve(&s)) + rng.random_range(0.0..2.0);
    Coefficients {
        a: rng.random_range(-1.0..1.0),
        b: uniform_vector(rng, n, 1.5),
        c: uniform_vector(rng, m, 0.8),
        d: uniform_matrix(rng, n, m, 0.8),
        r,
        s,
        q,
        region,
    }
}

/// Box `-lo <= K <= hi` with `lo, hi > 0`.
pub fn random_box(rng: &mut ChaCha8Rng, n: usize) -> Polyhedron {
    let lower = DVector::from_fn(n, |_, _| -rng.random_range(0.05..0.8));
    let upper = DVector::from_fn(n, |_, _| rng.random_range(0.05..0.8));
    Polyhedron::from_bounds(&lower, &upper).unwrap()
}

pub fn random_constant_problem(rng: &mut ChaCha8Rng, constrained: bool, horizon: f64, steps: usize) -> ProblemData {
    let n = rng.random_range(1..=3);
    let m = rng.random_range(1..=3);
    let region = if constrained {
        let k = rng.random_range(1..=6);
        random_region_with_origin(rng, n, k)
    } else {
        Polyhedron::unconstrained(n)
    };
    let coefficients = random_coefficients(rng, n, m, region);
    let q_terminal = rng.random_range(0.0..2.0);
    ProblemData::constant(coefficients, horizon, steps, q_terminal)
}

/// Classical RK4 backward from `g(T)` on the given grid.
pub fn rk4_backward(grid: &[f64], terminal: f64, rhs: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; grid.len()];
    let last = grid.len() - 1;
    g[last] = terminal;
    for i in (0..last).rev() {
        let (t1, t0) = (grid[i + 1], grid[i]);
        let h = t0 - t1;
        let y = g[i + 1];
        let k1 = rhs(t1, y);
        let k2 = rhs(t1 + h / 2.0, y + h / 2.0 * k1);
        let k3 = rhs(t1 + h / 2.0, y + h / 2.0 * k2);
        let k4 = rhs(t0, y + h * k3);
        g[i] = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    g
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: n,
        failure_persistence: None,
        ..Default::default()
    }
}
