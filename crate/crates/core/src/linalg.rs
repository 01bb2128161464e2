//! Small dense helpers around nalgebra for SPD matrices and the covariance
//! factorisation Sigma^-1 = A^T A.

use nalgebra::{DMatrix, DVector};

use crate::error::{LandError, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m).cholesky().ok_or(LandError::NotPositiveDefinite)?;
    Ok(symmetrize(&chol.inverse()))
}

/// ln |M| for SPD M.
pub fn spd_log_det(m: &DMatrix<f64>) -> Result<f64> {
    let chol = symmetrize(m).cholesky().ok_or(LandError::NotPositiveDefinite)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Lower Cholesky factor L with M = L L^T.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(symmetrize(m).cholesky().ok_or(LandError::NotPositiveDefinite)?.l())
}

/// Upper-triangular A with Sigma^-1 = A^T A.
pub fn factor_from_covariance(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let precision = spd_inverse(sigma)?;
    Ok(cholesky_lower(&precision)?.transpose())
}

pub fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let d = v.len();
    let mut s = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += m[(i, j)] * v[j];
        }
        s += v[i] * row;
    }
    s
}

pub fn outer_add(acc: &mut DMatrix<f64>, v: &[f64], weight: f64) {
    let d = v.len();
    for i in 0..d {
        for j in 0..d {
            acc[(i, j)] += weight * v[i] * v[j];
        }
    }
}

pub fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v)).iter().copied().collect()
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(LandError::invalid("expected a non-empty square matrix"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_reconstructs_precision() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let a = factor_from_covariance(&sigma).unwrap();
        assert_eq!(a[(1, 0)], 0.0);
        let back = spd_inverse(&(a.transpose() * &a)).unwrap();
        assert!((back - &sigma).norm() < 1e-12);
        let ld = spd_log_det(&sigma).unwrap();
        assert!((ld - (2.0f64 * 0.5 - 0.09).ln()).abs() < 1e-12);
    }

    #[test]
    fn non_spd_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(spd_inverse(&m), Err(LandError::NotPositiveDefinite)));
    }
}
