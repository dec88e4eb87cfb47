//! Small dense helpers over nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{HctlError, Result};

pub fn cholesky_lower(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    a.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| HctlError::Numerical(format!("{what}: Cholesky factorization failed")))
}

pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| HctlError::Numerical(format!("{what}: matrix is not positive definite")))
}

/// `A^{-1/2}` of a symmetric positive definite matrix, via eigendecomposition
/// with eigenvalues floored at `floor`.
pub fn sym_inv_sqrt(a: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let eig = a.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(HctlError::Numerical("block is not positive definite".into()));
    }
    let d = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| 1.0 / v.max(floor).sqrt()),
    );
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&d) * q.transpose())
}

/// Symmetrizes in place, removing round-off asymmetry.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn submatrix(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

/// Unbiased sample mean and covariance of row-major samples (`n x d`).
pub fn sample_mean_cov(samples: &[f64], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len() / d;
    let x = DMatrix::from_row_slice(n, d, samples);
    let mean = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
    let mut centered = x;
    for j in 0..d {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}
