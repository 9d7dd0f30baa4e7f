//! Phase-one linear program for polyhedron feasibility.
//!
//! Finds a point of `{K : H K <= d}` by solving
//!
//! ```text
//!     minimize    t
//!     subject to  H (K+ - K-) - t 1 + s = d,   K+, K-, t, s >= 0
//! ```
//!
//! with a dense tableau simplex. The start basis pivots `t` into the row with
//! the most negative right-hand side, which makes every slack nonnegative, so
//! no artificial variables are needed. Bland's rule guarantees termination.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub(crate) struct PhaseOne {
    pub witness: DVector<f64>,
    /// `max_i (H K - d)_i` at the witness, in the caller's units.
    pub max_violation: f64,
}

const PIVOT_EPS: f64 = 1e-12;

pub(crate) fn phase_one(h: &DMatrix<f64>, d: &DVector<f64>) -> PhaseOne {
    let (k, n) = h.shape();
    let zero = DVector::zeros(n);
    if k == 0 || d.iter().all(|&di| di >= 0.0) {
        return PhaseOne {
            max_violation: violation(h, d, &zero),
            witness: zero,
        };
    }

    // Row scaling leaves the feasible set unchanged and keeps pivots comparable.
    let mut rows = h.clone();
    let mut rhs = d.clone();
    for i in 0..k {
        let scale = rows.row(i).iter().fold(rhs[i].abs(), |a, x| a.max(x.abs()));
        if scale > 0.0 {
            rows.row_mut(i).scale_mut(1.0 / scale);
            rhs[i] /= scale;
        }
    }

    let t_col = 2 * n;
    let ncols = 2 * n + 1 + k;
    let mut tab = DMatrix::<f64>::zeros(k, ncols);
    for i in 0..k {
        for j in 0..n {
            tab[(i, j)] = rows[(i, j)];
            tab[(i, n + j)] = -rows[(i, j)];
        }
        tab[(i, t_col)] = -1.0;
        tab[(i, t_col + 1 + i)] = 1.0;
    }
    let mut basis: Vec<usize> = (0..k).map(|i| t_col + 1 + i).collect();

    let mut start = 0;
    for i in 1..k {
        if rhs[i] < rhs[start] {
            start = i;
        }
    }
    pivot(&mut tab, &mut rhs, &mut basis, start, t_col);

    let max_iter = 50 * (ncols + k);
    for _ in 0..max_iter {
        let t_value = basis
            .iter()
            .position(|&b| b == t_col)
            .map_or(0.0, |row| rhs[row]);
        if t_value <= 0.0 {
            break;
        }
        // Reduced cost of column j: c_j - c_B' B^{-1} A_j, with c = e_t.
        let t_row = basis.iter().position(|&b| b == t_col);
        let entering = (0..ncols).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let cj = if j == t_col { 1.0 } else { 0.0 };
            let zj = t_row.map_or(0.0, |r| tab[(r, j)]);
            cj - zj < -PIVOT_EPS
        });
        let Some(col) = entering else { break };

        let mut leave: Option<(usize, f64)> = None;
        for i in 0..k {
            let a = tab[(i, col)];
            if a > PIVOT_EPS {
                let ratio = rhs[i].max(0.0) / a;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((r, best)) => {
                        if ratio < best - PIVOT_EPS
                            || (ratio <= best + PIVOT_EPS && basis[i] < basis[r])
                        {
                            Some((i, ratio))
                        } else {
                            Some((r, best))
                        }
                    }
                };
            }
        }
        // t >= 0 bounds the objective, so an unbounded ray cannot occur.
        let Some((row, _)) = leave else { break };
        pivot(&mut tab, &mut rhs, &mut basis, row, col);
    }

    let mut witness = DVector::zeros(n);
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            witness[b] += rhs[i];
        } else if b < 2 * n {
            witness[b - n] -= rhs[i];
        }
    }
    PhaseOne {
        max_violation: violation(h, d, &witness),
        witness,
    }
}

fn violation(h: &DMatrix<f64>, d: &DVector<f64>, x: &DVector<f64>) -> f64 {
    if h.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    (h * x - d).max()
}

fn pivot(
    tab: &mut DMatrix<f64>,
    rhs: &mut DVector<f64>,
    basis: &mut [usize],
    row: usize,
    col: usize,
) {
    let p = tab[(row, col)];
    tab.row_mut(row).scale_mut(1.0 / p);
    rhs[row] /= p;
    for i in 0..tab.nrows() {
        if i == row {
            continue;
        }
        let factor = tab[(i, col)];
        if factor != 0.0 {
            for j in 0..tab.ncols() {
                let v = tab[(row, j)];
                tab[(i, j)] -= factor * v;
            }
            rhs[i] -= factor * rhs[row];
        }
    }
    basis[row] = col;
}
