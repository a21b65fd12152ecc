//! Cyclic Jacobi eigensolver for dense symmetric matrices.

use super::DenseMatrix;
use crate::error::{dim_err, LipError, Result};

pub const JACOBI_MAX_SWEEPS: usize = 100;
const OFF_DIAG_REL_TOL: f64 = 1e-12;
const SYMMETRY_REL_TOL: f64 = 1e-12;

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the unit eigenvector for `eigenvalues[k]`.
    pub eigenvectors: Option<DenseMatrix>,
}

/// Full decomposition with eigenvectors.
pub fn sym_eig(a: &DenseMatrix) -> Result<SymEigResult> {
    jacobi(a, true)
}

/// Eigenvalues only (ascending).
pub fn sym_eigvals(a: &DenseMatrix) -> Result<Vec<f64>> {
    Ok(jacobi(a, false)?.eigenvalues)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig(a: &DenseMatrix) -> Result<f64> {
    Ok(sym_eigvals(a)?[0])
}

fn jacobi(a: &DenseMatrix, want_vectors: bool) -> Result<SymEigResult> {
    if !a.is_square() {
        return Err(dim_err(format!("expected square matrix, got {}x{}", a.rows(), a.cols())));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_REL_TOL * a.max_abs().max(f64::MIN_POSITIVE) {
        return Err(LipError::Symmetry { asymmetry: asym });
    }
    let n = a.rows();
    let mut m = a.symmetrize();
    let mut v = want_vectors.then(|| DenseMatrix::identity(n));
    let target = OFF_DIAG_REL_TOL * a.frobenius_norm();

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off_diag_norm(&m) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_finite() {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                } else {
                    0.5 * apq / (aqq - app)
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, p, q, c, s, t);
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    // the final sweep may have finished the job
    if !converged && off_diag_norm(&m) > target {
        return Err(LipError::Convergence {
            iterations: JACOBI_MAX_SWEEPS,
            last_estimate: off_diag_norm(&m),
        });
    }

    let diag = m.diag();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[i].total_cmp(&diag[j]));
    let eigenvalues = order.iter().map(|&i| diag[i]).collect();
    let eigenvectors = v.map(|v| {
        let mut sorted = DenseMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            sorted.set_column(dst, &v.column(src));
        }
        sorted
    });
    Ok(SymEigResult { eigenvalues, eigenvectors })
}

fn rotate(m: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64, t: f64) {
    let n = m.rows();
    let apq = m[(p, q)];
    m[(p, p)] -= t * apq;
    m[(q, q)] += t * apq;
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[(k, p)];
        let akq = m[(k, q)];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        m[(k, p)] = new_kp;
        m[(p, k)] = new_kp;
        m[(k, q)] = new_kq;
        m[(q, k)] = new_kq;
    }
}

fn off_diag_norm(m: &DenseMatrix) -> f64 {
    let n = m.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += m[(i, j)] * m[(i, j)];
            }
        }
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gram;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn eigenvalue_examples() {
        assert!(close(&sym_eigvals(&DenseMatrix::from_diag(&[3.0, 1.0])).unwrap(), &[1.0, 3.0], 0.0));
        assert!(close(&sym_eigvals(&m(&[&[2.0, -1.0], &[-1.0, 2.0]])).unwrap(), &[1.0, 3.0], 1e-14));
        assert_eq!(sym_eigvals(&DenseMatrix::zeros(2, 2)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn min_eig_examples() {
        assert_eq!(min_eig(&DenseMatrix::identity(2)).unwrap(), 1.0);
        assert!((min_eig(&m(&[&[2.0, -1.0], &[-1.0, 2.0]])).unwrap() - 1.0).abs() < 1e-14);
        assert!((min_eig(&m(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap() + 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_asymmetric_and_non_square() {
        assert!(matches!(sym_eig(&m(&[&[1.0, 2.0], &[0.0, 1.0]])), Err(LipError::Symmetry { .. })));
        assert!(matches!(sym_eig(&DenseMatrix::zeros(2, 3)), Err(LipError::Dimension(_))));
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let w = DenseMatrix::from_fn(6, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * j as f64);
        let a = gram(&w);
        let res = sym_eig(&a).unwrap();
        let v = res.eigenvectors.unwrap();
        let recon = v.scale_cols(&res.eigenvalues).mul_t(&v);
        let resid = recon.sub(&a).unwrap().frobenius_norm();
        assert!(resid <= 1e-9 * a.frobenius_norm().max(1.0), "{resid}");
        let ortho = gram(&v).sub(&DenseMatrix::identity(5)).unwrap().frobenius_norm();
        assert!(ortho <= 1e-9);
        assert!(res.eigenvalues.windows(2).all(|p| p[0] <= p[1]));
    }
}
