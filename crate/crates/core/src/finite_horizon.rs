//! Backward integration of the constrained Riccati pair
//!
//! ```text
//!     dĜ/dt = -Ĝ C'C - 2 Ĝ A - q - min_{H K <= d} K'(Ĝ DD' + R)K + 2 (Ĝ(DC + B) + S)'K
//!     dḠ/dt = -Ḡ C'C - 2 Ḡ A - q - min_{H K <= d} K'(Ḡ DD' + R)K - 2 (Ḡ(DC + B) + S)'K
//!     Ĝ(T) = Ḡ(T) = q_T
//! ```
//!
//! with classical RK4 on the problem grid. Every stage solves its own inner QP,
//! warm-started from the previous active set. When the stage active sets of a
//! step disagree (a constraint switches inside the step), the step is compared
//! against two half steps and subdivided while they differ by more than
//! [`RiccatiOptions::switch_tolerance`].

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::serde_dense;
use crate::problem::{locate, Branch, Coefficients, ProblemData};
use crate::qp::{QpError, QpOptions};

/// `|G|` above this aborts the integration.
pub const BLOW_UP_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("inner QP failed at t = {time}: {source}")]
    Qp { time: f64, source: QpError },
    #[error("Riccati solution blew up (|G| > 1e12) at t = {time} on the {branch} branch")]
    BlowUp { time: f64, branch: &'static str },
    #[error("G D D' + R is singular at t = {time}")]
    SingularMatrix { time: f64 },
    #[error("time {time} is outside the horizon [0, {horizon}]")]
    OutOfHorizon { time: f64, horizon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiccatiOptions {
    pub qp: QpOptions,
    /// Two-half-step mismatch that triggers subdivision at an active-set switch.
    pub switch_tolerance: f64,
    pub max_subdivision_depth: u32,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self {
            qp: QpOptions::default(),
            switch_tolerance: 1e-6,
            max_subdivision_depth: 8,
        }
    }
}

/// Trajectories `Ĝ, Ḡ` and gains `K̂*, K̄*` on the problem grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub grid: Vec<f64>,
    pub g_hat: Vec<f64>,
    pub g_bar: Vec<f64>,
    #[serde(with = "serde_dense::vectors")]
    pub k_hat: Vec<DVector<f64>>,
    #[serde(with = "serde_dense::vectors")]
    pub k_bar: Vec<DVector<f64>>,
    pub q_terminal: f64,
    /// Steps that were subdivided because of an active-set switch.
    pub subdivided_steps: usize,
}

impl RiccatiSolution {
    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap_or(&0.0)
    }

    pub fn control_dim(&self) -> usize {
        self.k_hat.first().map_or(0, |k| k.len())
    }

    fn check_time(&self, t: f64) -> Result<(), RiccatiError> {
        let horizon = self.horizon();
        if !(t >= 0.0 && t <= horizon) {
            return Err(RiccatiError::OutOfHorizon { time: t, horizon });
        }
        Ok(())
    }

    /// `Ĝ(t)` or `Ḡ(t)`, interpolated linearly between grid points.
    pub fn g_at(&self, branch: Branch, t: f64) -> Result<f64, RiccatiError> {
        self.check_time(t)?;
        let g = match branch {
            Branch::Hat => &self.g_hat,
            Branch::Bar => &self.g_bar,
        };
        let (i, theta) = locate(&self.grid, t);
        Ok(if theta == 0.0 {
            g[i]
        } else {
            g[i] * (1.0 - theta) + g[i + 1] * theta
        })
    }

    /// `K̂*(t)` or `K̄*(t)` written into `out`, interpolated linearly between grid points.
    pub fn gain_into(&self, branch: Branch, t: f64, out: &mut DVector<f64>) {
        let k = match branch {
            Branch::Hat => &self.k_hat,
            Branch::Bar => &self.k_bar,
        };
        let (i, theta) = locate(&self.grid, t);
        if theta == 0.0 {
            out.copy_from(&k[i]);
        } else {
            out.copy_from(&k[i]);
            *out *= 1.0 - theta;
            out.axpy(theta, &k[i + 1], 1.0);
        }
    }

    pub fn gain_at(&self, branch: Branch, t: f64) -> Result<DVector<f64>, RiccatiError> {
        self.check_time(t)?;
        let mut out = DVector::zeros(self.control_dim());
        self.gain_into(branch, t, &mut out);
        Ok(out)
    }

    pub fn policy(&self) -> PiecewisePolicy<'_> {
        PiecewisePolicy { solution: self }
    }
}

/// `u(t, x) = K̂*(t) x` for `x >= 0` and `-K̄*(t) x` for `x < 0`.
#[derive(Debug, Clone, Copy)]
pub struct PiecewisePolicy<'a> {
    pub solution: &'a RiccatiSolution,
}

impl PiecewisePolicy<'_> {
    pub fn evaluate(&self, t: f64, x: f64) -> Result<DVector<f64>, RiccatiError> {
        evaluate_policy(self, t, x)
    }
}

pub fn evaluate_policy(policy: &PiecewisePolicy<'_>, t: f64, x: f64) -> Result<DVector<f64>, RiccatiError> {
    let sol = policy.solution;
    sol.check_time(t)?;
    let mut u = DVector::zeros(sol.control_dim());
    // x = 0 takes the positive branch; the control vanishes either way.
    if x >= 0.0 {
        sol.gain_into(Branch::Hat, t, &mut u);
        u *= x;
    } else {
        sol.gain_into(Branch::Bar, t, &mut u);
        u *= -x;
    }
    Ok(u)
}

/// `V(t, x) = x² Ĝ(t)` for `x >= 0`, `x² Ḡ(t)` otherwise.
pub fn value_function(sol: &RiccatiSolution, t: f64, x: f64) -> Result<f64, RiccatiError> {
    let branch = if x >= 0.0 { Branch::Hat } else { Branch::Bar };
    Ok(x * x * sol.g_at(branch, t)?)
}

struct BranchTrajectory {
    g: Vec<f64>,
    k: Vec<DVector<f64>>,
    subdivided: usize,
}

struct Integrator<'a> {
    data: &'a ProblemData,
    branch: Branch,
    options: &'a RiccatiOptions,
    warm: Vec<usize>,
}

struct Stage {
    slope: f64,
    active: Vec<usize>,
}

impl Integrator<'_> {
    fn rhs(&mut self, coeffs: &Coefficients, t: f64, g: f64) -> Result<(Stage, DVector<f64>), RiccatiError> {
        if !g.is_finite() || g.abs() > BLOW_UP_LIMIT {
            return Err(RiccatiError::BlowUp { time: t, branch: self.branch.name() });
        }
        let (slope, sol) = coeffs
            .riccati_rhs(g, self.branch, &self.options.qp, Some(&self.warm))
            .map_err(|source| RiccatiError::Qp { time: t, source })?;
        self.warm.clone_from(&sol.active_set);
        Ok((Stage { slope, active: sol.active_set }, sol.k_star))
    }

    /// One backward RK4 step from `t_hi` to `t_lo`.
    fn rk4(&mut self, t_hi: f64, t_lo: f64, g: f64) -> Result<(f64, bool), RiccatiError> {
        let h = t_hi - t_lo;
        let t_mid = t_hi - 0.5 * h;
        let c_hi = self.data.at(t_hi);
        let c_mid = self.data.at(t_mid);
        let c_lo = self.data.at(t_lo);
        let (k1, _) = self.rhs(&c_hi, t_hi, g)?;
        let (k2, _) = self.rhs(&c_mid, t_mid, g - 0.5 * h * k1.slope)?;
        let (k3, _) = self.rhs(&c_mid, t_mid, g - 0.5 * h * k2.slope)?;
        let (k4, _) = self.rhs(&c_lo, t_lo, g - h * k3.slope)?;
        let next = g - h / 6.0 * (k1.slope + 2.0 * k2.slope + 2.0 * k3.slope + k4.slope);
        let consistent = k1.active == k2.active && k2.active == k3.active && k3.active == k4.active;
        Ok((next, consistent))
    }

    fn span(&mut self, t_hi: f64, t_lo: f64, g: f64, depth: u32) -> Result<(f64, bool), RiccatiError> {
        let (full, consistent) = self.rk4(t_hi, t_lo, g)?;
        if consistent || depth >= self.options.max_subdivision_depth {
            return Ok((full, false));
        }
        let t_mid = 0.5 * (t_hi + t_lo);
        let (half, _) = self.rk4(t_hi, t_mid, g)?;
        let (halves, _) = self.rk4(t_mid, t_lo, half)?;
        if (halves - full).abs() <= self.options.switch_tolerance * g.abs().max(1.0) {
            return Ok((halves, true));
        }
        let (left, _) = self.span(t_hi, t_mid, g, depth + 1)?;
        let (right, _) = self.span(t_mid, t_lo, left, depth + 1)?;
        Ok((right, true))
    }

    fn run(mut self) -> Result<BranchTrajectory, RiccatiError> {
        let grid = &self.data.grid;
        let n_pts = grid.len();
        let mut g = vec![0.0; n_pts];
        let mut k = vec![DVector::zeros(self.data.control_dim()); n_pts];
        g[n_pts - 1] = self.data.q_terminal;
        let mut subdivided = 0;
        for i in (0..n_pts - 1).rev() {
            let t_hi = grid[i + 1];
            // Gain at the upper grid point from the converged G there.
            let (_, gain) = self.rhs(self.data.slice(i + 1), t_hi, g[i + 1])?;
            k[i + 1] = gain;
            let (next, split) = self.span(t_hi, grid[i], g[i + 1], 0)?;
            subdivided += usize::from(split);
            if !next.is_finite() || next.abs() > BLOW_UP_LIMIT {
                return Err(RiccatiError::BlowUp { time: grid[i], branch: self.branch.name() });
            }
            g[i] = next;
        }
        let (_, gain) = self.rhs(self.data.slice(0), grid[0], g[0])?;
        k[0] = gain;
        Ok(BranchTrajectory { g, k, subdivided })
    }
}

fn solve_branch(data: &ProblemData, branch: Branch, options: &RiccatiOptions) -> Result<BranchTrajectory, RiccatiError> {
    Integrator { data, branch, options, warm: Vec::new() }.run()
}

/// Integrates both Riccati ODEs backward from `T` and records the gains.
pub fn solve_riccati_pair(data: &ProblemData, options: &RiccatiOptions) -> Result<RiccatiSolution, RiccatiError> {
    let (hat, bar) = rayon::join(
        || solve_branch(data, Branch::Hat, options),
        || solve_branch(data, Branch::Bar, options),
    );
    let (hat, bar) = (hat?, bar?);
    Ok(RiccatiSolution {
        grid: data.grid.clone(),
        g_hat: hat.g,
        g_bar: bar.g,
        k_hat: hat.k,
        k_bar: bar.k,
        q_terminal: data.q_terminal,
        subdivided_steps: hat.subdivided + bar.subdivided,
    })
}

/// Classical unconstrained Riccati equation
/// `dG/dt = -G C'C - 2GA - q + (G(DC + B) + S)'(G DD' + R)^{-1}(G(DC + B) + S)`,
/// integrated backward with RK4 on the problem grid. Constraints are ignored.
pub fn solve_unconstrained_riccati(data: &ProblemData) -> Result<Vec<f64>, RiccatiError> {
    let grid = &data.grid;
    let mut g = vec![0.0; grid.len()];
    let last = grid.len() - 1;
    g[last] = data.q_terminal;
    let rhs = |t: f64, value: f64| -> Result<f64, RiccatiError> {
        if !value.is_finite() || value.abs() > BLOW_UP_LIMIT {
            return Err(RiccatiError::BlowUp { time: t, branch: "unconstrained" });
        }
        data.at(t)
            .unconstrained_rhs(value)
            .ok_or(RiccatiError::SingularMatrix { time: t })
    };
    for i in (0..last).rev() {
        let (t_hi, t_lo) = (grid[i + 1], grid[i]);
        let h = t_hi - t_lo;
        let t_mid = t_hi - 0.5 * h;
        let k1 = rhs(t_hi, g[i + 1])?;
        let k2 = rhs(t_mid, g[i + 1] - 0.5 * h * k1)?;
        let k3 = rhs(t_mid, g[i + 1] - 0.5 * h * k2)?;
        let k4 = rhs(t_lo, g[i + 1] - h * k3)?;
        g[i] = g[i + 1] - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    Ok(g)
}

/// Gain schedule as CSV: `t, g_hat, g_bar, k_hat_1..n, k_bar_1..n`.
pub fn export_gain_schedule(sol: &RiccatiSolution) -> String {
    let n = sol.control_dim();
    let mut header = vec!["t".to_string(), "g_hat".into(), "g_bar".into()];
    header.extend((1..=n).map(|i| format!("k_hat_{i}")));
    header.extend((1..=n).map(|i| format!("k_bar_{i}")));
    let rows = (0..sol.grid.len()).map(|i| {
        let mut row = vec![sol.grid[i], sol.g_hat[i], sol.g_bar[i]];
        row.extend(sol.k_hat[i].iter());
        row.extend(sol.k_bar[i].iter());
        row
    });
    crate::export::csv_table(&header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::Polyhedron;
    use nalgebra::DMatrix;

    fn scalar_toy() -> Coefficients {
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
    fn zero_cost_keeps_g_at_zero() {
        let mut c = scalar_toy();
        c.q = 0.0;
        c.region = Polyhedron::from_bounds(&DVector::from_element(1, -1.0), &DVector::from_element(1, 2.0)).unwrap();
        let data = ProblemData::constant(c, 1.0, 50, 0.0);
        let sol = solve_riccati_pair(&data, &RiccatiOptions::default()).unwrap();
        assert!(sol.g_hat.iter().chain(&sol.g_bar).all(|&g| g == 0.0));
        assert!(sol.k_hat.iter().all(|k| k.norm() < 1e-15));
        let unc = solve_unconstrained_riccati(&data).unwrap();
        assert!(unc.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn scalar_toy_matches_richardson_oracle() {
        // Oracle: RK4 on the closed form dG/dt = -1 + G²/(G + 1) at three step
        // sizes, extrapolated with the fourth-order Richardson formula.
        let f = |g: f64| -1.0 + g * g / (g + 1.0);
        let integrate = |steps: usize| {
            let h = 1.0 / steps as f64;
            let mut g = 0.0;
            for _ in 0..steps {
                let k1 = f(g);
                let k2 = f(g - 0.5 * h * k1);
                let k3 = f(g - 0.5 * h * k2);
                let k4 = f(g - h * k3);
                g -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            g
        };
        let coarse = integrate(2000);
        let fine = integrate(4000);
        let oracle = fine + (fine - coarse) / 15.0;
        assert!((fine - coarse).abs() < 1e-12);

        let data = ProblemData::constant(scalar_toy(), 1.0, 2000, 0.0);
        let g = solve_unconstrained_riccati(&data).unwrap();
        assert!((g[0] - oracle).abs() < 1e-8, "{} vs {}", g[0], oracle);
        let pair = solve_riccati_pair(&data, &RiccatiOptions::default()).unwrap();
        assert!((pair.g_hat[0] - oracle).abs() < 1e-8);
        assert!((pair.g_bar[0] - oracle).abs() < 1e-8);
    }

    #[test]
    fn terminal_values_and_export_shape() {
        let data = ProblemData::constant(scalar_toy(), 0.5, 20, 0.7);
        let sol = solve_riccati_pair(&data, &RiccatiOptions::default()).unwrap();
        assert_eq!(sol.g_hat[20], 0.7);
        assert_eq!(sol.g_bar[20], 0.7);
        let csv = export_gain_schedule(&sol);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 22);
        assert_eq!(lines[0], "t,g_hat,g_bar,k_hat_1,k_bar_1");
        let last: Vec<f64> = lines[21].split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(last[1], 0.7);
        assert_eq!(last[2], 0.7);
        assert_eq!(value_function(&sol, 0.5, 2.0).unwrap(), 4.0 * 0.7);
        assert_eq!(value_function(&sol, 0.2, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn policy_branches() {
        let sol = RiccatiSolution {
            grid: vec![0.0, 1.0],
            g_hat: vec![1.0, 0.0],
            g_bar: vec![1.0, 0.0],
            k_hat: vec![DVector::from_vec(vec![0.3, -0.1]); 2],
            k_bar: vec![DVector::from_vec(vec![0.2, 0.4]); 2],
            q_terminal: 0.0,
            subdivided_steps: 0,
        };
        let p = sol.policy();
        assert_eq!(p.evaluate(0.5, 0.0).unwrap(), DVector::zeros(2));
        let u = p.evaluate(0.5, 2.0).unwrap();
        assert!((u - DVector::from_vec(vec![0.6, -0.2])).norm() < 1e-15);
        let u = p.evaluate(0.5, -1.0).unwrap();
        assert!((u - DVector::from_vec(vec![0.2, 0.4])).norm() < 1e-15);
        assert!(matches!(p.evaluate(1.5, 1.0), Err(RiccatiError::OutOfHorizon { .. })));
        assert!(matches!(value_function(&sol, -0.1, 1.0), Err(RiccatiError::OutOfHorizon { .. })));
    }

    #[test]
    fn singular_omega_at_zero_is_reported() {
        let mut c = scalar_toy();
        c.r = DMatrix::zeros(1, 1);
        c.q = 0.0;
        c.region = Polyhedron::from_bounds(&DVector::from_element(1, -1.0), &DVector::from_element(1, 1.0)).unwrap();
        let data = ProblemData::constant(c, 1.0, 10, 0.0);
        let err = solve_riccati_pair(&data, &RiccatiOptions::default()).unwrap_err();
        assert!(matches!(err, RiccatiError::Qp { source: QpError::NotPositiveDefinite { .. }, .. }));
    }

    #[test]
    fn blow_up_reports_time() {
        // Strongly unstable open loop with no way to stabilize: u is pinned to 0.
        let mut c = scalar_toy();
        c.a = 20.0;
        c.q = 1.0;
        c.region = Polyhedron::from_bounds(&DVector::zeros(1), &DVector::zeros(1)).unwrap();
        let data = ProblemData::constant(c, 2.0, 400, 0.0);
        let err = solve_riccati_pair(&data, &RiccatiOptions::default()).unwrap_err();
        assert!(matches!(err, RiccatiError::BlowUp { time, .. } if time > 0.0 && time < 2.0), "{err:?}");
    }
}
