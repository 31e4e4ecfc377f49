//! Small dense linear algebra for symmetric matrices: cyclic Jacobi
//! eigendecomposition and Cholesky factorisation. Adequate for `L ≤ 64`.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("Jacobi sweep failed to converge in {0} sweeps")]
    EigenFailure(usize),
    #[error("matrix is not positive definite (pivot {0} is {1})")]
    NotPositiveDefinite(usize, f64),
    #[error("matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),
}

const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;

/// Eigendecomposition `A = V diag(values) Vᵀ` of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues, ascending.
    pub values: Array1<f64>,
    /// Columns are the matching eigenvectors.
    pub vectors: Array2<f64>,
}

/// Cyclic Jacobi rotations; deterministic and accurate for small symmetric
/// matrices. Input is symmetrised as `(A + Aᵀ)/2` first.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<SymmetricEigen, LinalgError> {
    let (n, cols) = a.dim();
    if n != cols {
        return Err(LinalgError::NotSquare(n, cols));
    }
    let mut m = (a + &a.t()) * 0.5;
    let mut v: Array2<f64> = Array2::eye(n);

    for _sweep in 0..MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    s += m[[i, j]] * m[[i, j]];
                }
            }
            s.sqrt()
        };
        if off < OFF_DIAG_TOL {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap());
            let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
            let mut vectors = Array2::zeros((n, n));
            for (dst, &src) in order.iter().enumerate() {
                for row in 0..n {
                    vectors[[row, dst]] = v[[row, src]];
                }
            }
            return Ok(SymmetricEigen { values, vectors });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < OFF_DIAG_TOL / (n * n) as f64 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = cos * mkp - sin * mkq;
                    m[[k, q]] = sin * mkp + cos * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = cos * mpk - sin * mqk;
                    m[[q, k]] = sin * mpk + cos * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = cos * vkp - sin * vkq;
                    v[[k, q]] = sin * vkp + cos * vkq;
                }
            }
        }
    }
    Err(LinalgError::EigenFailure(MAX_SWEEPS))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let (n, cols) = a.dim();
    if n != cols {
        return Err(LinalgError::NotSquare(n, cols));
    }
    let mut l: Array2<f64> = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(LinalgError::NotPositiveDefinite(i, sum));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// `log det A` of a symmetric positive definite matrix via Cholesky.
pub fn spd_log_det(a: &Array2<f64>) -> Result<f64, LinalgError> {
    let l = cholesky(a)?;
    Ok(2.0 * (0..a.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>())
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(a: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let l = cholesky(a)?;
    let n = a.nrows();
    let mut inv = Array2::zeros((n, n));
    for col in 0..n {
        // Solve L y = e_col, then Lᵀ x = y.
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                sum -= l[[i, k]] * y[k];
            }
            y[i] = sum / l[[i, i]];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in (i + 1)..n {
                sum -= l[[k, i]] * x[k];
            }
            x[i] = sum / l[[i, i]];
        }
        for row in 0..n {
            inv[[row, col]] = x[row];
        }
    }
    // Symmetrise away rounding asymmetry.
    let inv_t = inv.t().to_owned();
    Ok((&inv + &inv_t) * 0.5)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Array2<f64>) -> Result<f64, LinalgError> {
    Ok(symmetric_eigen(a)?.values[0])
}
