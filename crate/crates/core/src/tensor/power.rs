use super::{dot, norm2, DenseMatrix};
use crate::error::{LipError, Result};

/// Largest singular value of `w` by power iteration on `W^T W`.
///
/// The iteration starts from the deterministic vector `(1, 1/2, 1/3, ...)`
/// normalized, and stops once the eigen-residual `||W^T W v - lambda v||`
/// falls below `tol * lambda`.
pub fn spectral_norm(w: &DenseMatrix, tol: f64, max_iter: usize) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(LipError::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let n = w.cols();
    let mut v: Vec<f64> = (1..=n).map(|k| 1.0 / k as f64).collect();
    normalize(&mut v);

    let mut restarted = false;
    let mut lambda = 0.0;
    let mut prev_step = f64::INFINITY;
    for it in 0..max_iter {
        let prev = lambda;
        let z = w.t_matvec(&w.matvec(&v));
        lambda = dot(&v, &z);
        let zn = norm2(&z);
        if zn == 0.0 {
            if restarted || w.max_abs() == 0.0 {
                return Ok(0.0);
            }
            // seed lies in the null space; restart on the heaviest column
            let norms = w.column_norms();
            let k = (0..n).max_by(|&a, &b| norms[a].total_cmp(&norms[b])).unwrap_or(0);
            v = vec![0.0; n];
            v[k] = 1.0;
            restarted = true;
            continue;
        }
        let resid: f64 =
            z.iter().zip(&v).map(|(zi, vi)| (zi - lambda * vi).powi(2)).sum::<f64>().sqrt();
        if resid <= tol * lambda {
            return Ok(lambda.max(0.0).sqrt());
        }
        // With a clustered top spectrum the vector converges slowly but the
        // Rayleigh quotient rises geometrically; bound its remaining tail.
        let step = lambda - prev;
        if it > 2 && step >= 0.0 && step < prev_step {
            let rate = step / prev_step;
            let tail = step * rate / (1.0 - rate);
            if tail <= 0.5 * tol * lambda {
                return Ok((lambda + tail).max(0.0).sqrt());
            }
        }
        prev_step = if step > 0.0 { step } else { f64::INFINITY };
        v = z;
        v.iter_mut().for_each(|x| *x /= zn);
    }
    Err(LipError::Convergence { iterations: max_iter, last_estimate: lambda.max(0.0).sqrt() })
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    v.iter_mut().for_each(|x| *x /= n);
}
