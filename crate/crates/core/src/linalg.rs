//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

/// Returns `(m + m') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of a symmetric matrix (0 for an empty matrix).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Linear interpolation `(1 - theta) a + theta b` for matrices of equal shape.
pub fn lerp_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: f64) -> DMatrix<f64> {
    a * (1.0 - theta) + b * theta
}

pub fn lerp_vector(a: &DVector<f64>, b: &DVector<f64>, theta: f64) -> DVector<f64> {
    a * (1.0 - theta) + b * theta
}

/// Serde adapters that write vectors as JSON arrays and matrices as arrays of rows.
pub mod serde_dense {
    use nalgebra::{DMatrix, DVector};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub mod vector {
        use super::*;

        pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.as_slice().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
            let raw = Vec::<f64>::deserialize(d)?;
            Ok(DVector::from_vec(raw))
        }
    }

    pub mod matrix {
        use super::*;

        pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
            rows(m).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
            let raw = Vec::<Vec<f64>>::deserialize(d)?;
            from_rows(&raw).map_err(D::Error::custom)
        }
    }

    pub mod vectors {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
            let raw: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
            raw.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Vec<DVector<f64>>, D::Error> {
            let raw = Vec::<Vec<f64>>::deserialize(d)?;
            Ok(raw.into_iter().map(DVector::from_vec).collect())
        }
    }

    pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect()
    }

    /// Builds a matrix from row vectors. An empty list gives a 0x0 matrix.
    pub fn from_rows(raw: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let nrows = raw.len();
        let ncols = raw.first().map_or(0, Vec::len);
        if raw.iter().any(|r| r.len() != ncols) {
            return Err("matrix rows have unequal lengths".to_string());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| raw[i][j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_eigenvalue_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 2.0]));
        assert!((min_eigenvalue(&m) + 1.0).abs() < 1e-14);
    }

    #[test]
    fn from_rows_rejects_ragged() {
        assert!(serde_dense::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        let m = serde_dense::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m[(1, 0)], 3.0);
        assert_eq!(serde_dense::rows(&m), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }
}
