//! Diagonal scalings `T` with `W^T W <= T`.
//!
//! Each constructor returns a [`ScalingVector`] carrying the diagonal of `T`
//! and its feasibility margin `min_eig(T - W^T W)`, computed once so layers
//! can check the certificate without touching an eigensolver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LipError, Result};
use crate::tensor::{self, gram, min_eig, DenseMatrix, PSD_RELATIVE_TOL};

/// Power-iteration residual tolerance used by [`t_sn`].
pub const SN_TOL: f64 = 1e-10;
pub const SN_MAX_ITER: usize = 200_000;
/// Largest dimension [`t_opt_heuristic`] accepts.
pub const HEURISTIC_MAX_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMethod {
    Sn,
    Aol,
    Sll,
    Gamma,
    #[serde(rename = "opt")]
    HeuristicOpt,
    /// Supplied externally (e.g. read from a file) rather than derived from `W`.
    Given,
}

impl ScalingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScalingMethod::Sn => "sn",
            ScalingMethod::Aol => "aol",
            ScalingMethod::Sll => "sll",
            ScalingMethod::Gamma => "gamma",
            ScalingMethod::HeuristicOpt => "opt",
            ScalingMethod::Given => "given",
        }
    }
}

/// Diagonal of `T` plus its feasibility certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingVector {
    pub diag: Vec<f64>,
    pub method: ScalingMethod,
    /// `min_eig(T - W^T W)`.
    pub feasibility_margin: f64,
    /// `1e-9 * max(1, ||W^T W||_F)`; the margin may dip this far below zero.
    pub tolerance: f64,
}

impl ScalingVector {
    /// Computes the margin of `diag` against `w` without asserting feasibility.
    pub fn evaluate(w: &DenseMatrix, diag: Vec<f64>, method: ScalingMethod) -> Result<Self> {
        Self::evaluate_with_gram(&gram(w), diag, method)
    }

    fn evaluate_with_gram(g: &DenseMatrix, diag: Vec<f64>, method: ScalingMethod) -> Result<Self> {
        if diag.len() != g.rows() {
            return Err(dim_err(format!(
                "scaling has {} entries but W has {} columns",
                diag.len(),
                g.rows()
            )));
        }
        if diag.iter().any(|v| !v.is_finite()) {
            return Err(LipError::NonFinite);
        }
        let margin = min_eig(&DenseMatrix::from_diag(&diag).sub(g)?)?;
        Ok(Self { diag, method, feasibility_margin: margin, tolerance: gram_tolerance(g) })
    }

    fn certified(g: &DenseMatrix, diag: Vec<f64>, method: ScalingMethod) -> Result<Self> {
        let t = Self::evaluate_with_gram(g, diag, method)?;
        t.ensure_feasible()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Margin clears the tolerance and every entry is strictly positive.
    pub fn is_feasible(&self) -> bool {
        self.feasibility_margin >= -self.tolerance && self.diag.iter().all(|&v| v > 0.0)
    }

    pub fn ensure_feasible(&self) -> Result<()> {
        if self.is_feasible() {
            Ok(())
        } else {
            Err(LipError::Feasibility { margin: self.feasibility_margin, tolerance: self.tolerance })
        }
    }

    /// Entries of `T^{-1/2}`.
    pub fn inv_sqrt(&self) -> Vec<f64> {
        self.diag.iter().map(|v| 1.0 / v.sqrt()).collect()
    }

    /// Entries of `T^{-1}`.
    pub fn inv(&self) -> Vec<f64> {
        self.diag.iter().map(|v| 1.0 / v).collect()
    }
}

/// Strictly positive `q` for the SLL scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct QVector(Vec<f64>);

impl QVector {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(LipError::Domain(format!("q[{i}] = {v} must be positive and finite")));
        }
        Ok(Self(q))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    /// `q = exp(log_q)`, positive by construction.
    pub fn from_log(log_q: &[f64]) -> Result<Self> {
        Self::new(log_q.iter().map(|v| v.exp()).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `Gamma` with `Gamma W^T W Gamma <= Gamma`; zero entries mark zero columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaScaling {
    pub diag: Vec<f64>,
    /// `min_eig(Gamma - Gamma W^T W Gamma)`.
    pub margin: f64,
    pub tolerance: f64,
}

fn gram_tolerance(g: &DenseMatrix) -> f64 {
    PSD_RELATIVE_TOL * g.frobenius_norm().max(1.0)
}

fn first_zero_column(g: &DenseMatrix) -> Option<usize> {
    (0..g.rows()).find(|&i| g[(i, i)] == 0.0)
}

/// AOL diagonal `sum_j |G_ij|` of a Gram matrix.
pub fn aol_diag(g: &DenseMatrix) -> Vec<f64> {
    g.abs_row_sums()
}

/// SLL diagonal `sum_j |G_ij| q_j / q_i` of a Gram matrix.
pub fn sll_diag(g: &DenseMatrix, q: &[f64]) -> Vec<f64> {
    (0..g.rows())
        .map(|i| {
            let s: f64 = g.row(i).iter().zip(q).map(|(gij, qj)| gij.abs() * qj).sum();
            s / q[i]
        })
        .collect()
}

/// `T = ||W||_2^2 I`.
pub fn t_sn(w: &DenseMatrix) -> Result<ScalingVector> {
    if w.max_abs() == 0.0 {
        return Err(LipError::ZeroWeight);
    }
    let sigma = tensor::spectral_norm(w, SN_TOL, SN_MAX_ITER)?;
    ScalingVector::certified(&gram(w), vec![sigma * sigma; w.cols()], ScalingMethod::Sn)
}

/// `T_ii = sum_j |W^T W|_ij`.
pub fn t_aol(w: &DenseMatrix) -> Result<ScalingVector> {
    let g = gram(w);
    if let Some(column) = first_zero_column(&g) {
        return Err(LipError::ZeroColumn { column });
    }
    let d = aol_diag(&g);
    ScalingVector::certified(&g, d, ScalingMethod::Aol)
}

/// `T_ii = sum_j |W^T W|_ij q_j / q_i`.
///
/// Feasibility is checked twice: by Gershgorin on `T - Q W^T W Q^{-1}` with
/// `Q = diag(1/q)`, and by the eigenvalue margin.
pub fn t_sll(w: &DenseMatrix, q: &QVector) -> Result<ScalingVector> {
    if q.len() != w.cols() {
        return Err(dim_err(format!("q has {} entries, W has {} columns", q.len(), w.cols())));
    }
    let g = gram(w);
    if let Some(column) = first_zero_column(&g) {
        return Err(LipError::ZeroColumn { column });
    }
    let d = sll_diag(&g, q.as_slice());
    let t = ScalingVector::certified(&g, d, ScalingMethod::Sll)?;
    let similar = similarity_residual(&g, &t.diag, q.as_slice());
    if !gershgorin_nonneg(&similar, t.tolerance) {
        return Err(LipError::Feasibility { margin: t.feasibility_margin, tolerance: t.tolerance });
    }
    Ok(t)
}

/// `T - Q G Q^{-1}` with `Q = diag(1/q)`, i.e. entries `T_ii δ_ij - G_ij q_j / q_i`.
pub fn similarity_residual(g: &DenseMatrix, t: &[f64], q: &[f64]) -> DenseMatrix {
    let n = g.rows();
    DenseMatrix::from_fn(n, n, |i, j| {
        let v = -g[(i, j)] * q[j] / q[i];
        if i == j {
            t[i] + v
        } else {
            v
        }
    })
}

/// Row-wise diagonal dominance with non-negative diagonal, up to `slack`.
fn gershgorin_nonneg(a: &DenseMatrix, slack: f64) -> bool {
    (0..a.rows()).all(|i| {
        let off: f64 =
            a.row(i).iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v.abs()).sum();
        a[(i, i)] >= -slack && a[(i, i)] - off >= -slack
    })
}

/// Scaling that tolerates zero columns of `W`.
pub fn gamma_variant(w: &DenseMatrix) -> Result<GammaScaling> {
    let g = gram(w);
    let diag: Vec<f64> = g
        .abs_row_sums()
        .into_iter()
        .map(|s| if s == 0.0 { 0.0 } else { 1.0 / s })
        .collect();
    let scaled = g.scale_rows(&diag).scale_cols(&diag);
    let margin = min_eig(&DenseMatrix::from_diag(&diag).sub(&scaled)?.symmetrize())?;
    let tolerance = PSD_RELATIVE_TOL * scaled.frobenius_norm().max(1.0);
    if margin < -tolerance {
        return Err(LipError::Feasibility { margin, tolerance });
    }
    Ok(GammaScaling { diag, margin, tolerance })
}

/// `min_eig(T - W^T W)`.
pub fn check_feasible(w: &DenseMatrix, t: &ScalingVector) -> Result<f64> {
    if t.len() != w.cols() {
        return Err(dim_err(format!("T has {} entries, W has {} columns", t.len(), w.cols())));
    }
    min_eig(&DenseMatrix::from_diag(&t.diag).sub(&gram(w))?)
}

/// Distance of `W T^{-1/2}` to orthogonality as
/// `(tr(I - T^{-1/2} G T^{-1/2}), ||T^{-1/2} G T^{-1/2} - I||_F)`.
pub fn ortho_distance(w: &DenseMatrix, t: &ScalingVector) -> Result<(f64, f64)> {
    if t.len() != w.cols() {
        return Err(dim_err(format!("T has {} entries, W has {} columns", t.len(), w.cols())));
    }
    t.ensure_feasible()?;
    let g = gram(w);
    let (trace, fro) = ortho_metrics(&g, &t.diag);
    if fro > trace + 1e-9 {
        return Err(LipError::Feasibility { margin: trace - fro, tolerance: 1e-9 });
    }
    Ok((trace, fro))
}

fn ortho_metrics(g: &DenseMatrix, t: &[f64]) -> (f64, f64) {
    let n = g.rows();
    let s: Vec<f64> = t.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut trace = 0.0;
    let mut fro2 = 0.0;
    for i in 0..n {
        trace += 1.0 - g[(i, i)] / t[i];
        for j in 0..n {
            let x = s[i] * g[(i, j)] * s[j] - if i == j { 1.0 } else { 0.0 };
            fro2 += x * x;
        }
    }
    (trace, fro2.sqrt())
}

fn frobenius_objective(g: &DenseMatrix, t: &[f64]) -> f64 {
    ortho_metrics(g, t).1
}

/// `T_ii = aol_i (1 + u_i)`: a member of the diagonally dominant feasible set
/// for any `u >= 0`.
pub fn perturb_aol(w: &DenseMatrix, u: &[f64]) -> Result<ScalingVector> {
    let g = gram(w);
    perturb_aol_with_gram(&g, &aol_diag(&g), u)
}

fn perturb_aol_with_gram(g: &DenseMatrix, aol: &[f64], u: &[f64]) -> Result<ScalingVector> {
    if u.len() != aol.len() {
        return Err(dim_err("perturbation length differs from W columns"));
    }
    let d = aol.iter().zip(u).map(|(a, ui)| a * (1.0 + ui)).collect();
    let t = ScalingVector::certified(g, d, ScalingMethod::Given)?;
    Ok(t)
}

/// Samples `count` scalings `T_ii = aol_i (1 + u_i)`, `u_i ~ U[0, 2]`.
pub fn sample_feasible_dd(w: &DenseMatrix, count: usize, rng_seed: u64) -> Result<Vec<ScalingVector>> {
    let g = gram(w);
    if let Some(column) = first_zero_column(&g) {
        return Err(LipError::ZeroColumn { column });
    }
    let aol = aol_diag(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..count)
        .map(|_| {
            let u: Vec<f64> = (0..aol.len()).map(|_| rng.random_range(0.0..=2.0)).collect();
            perturb_aol_with_gram(&g, &aol, &u)
        })
        .collect()
}

/// Searches beyond the diagonally dominant set for a `T` with a smaller
/// Frobenius orthogonality objective than AOL, keeping `T - W^T W` PSD.
///
/// Coordinate descent over `log T_ii`, restarted `iters` times from random
/// upward perturbations of the incumbent. Never returns anything worse than
/// the AOL starting point.
pub fn t_opt_heuristic(w: &DenseMatrix, iters: usize, rng_seed: u64) -> Result<ScalingVector> {
    let n = w.cols();
    if n > HEURISTIC_MAX_DIM {
        return Err(LipError::Scale(format!(
            "heuristic optimal scaling limited to n <= {HEURISTIC_MAX_DIM}, got {n}"
        )));
    }
    let g = gram(w);
    if let Some(column) = first_zero_column(&g) {
        return Err(LipError::ZeroColumn { column });
    }
    let feasible = |log_t: &[f64]| -> Result<bool> {
        let t: Vec<f64> = log_t.iter().map(|v| v.exp()).collect();
        Ok(min_eig(&DenseMatrix::from_diag(&t).sub(&g)?)? >= 0.0)
    };
    let objective = |log_t: &[f64]| -> f64 {
        let t: Vec<f64> = log_t.iter().map(|v| v.exp()).collect();
        frobenius_objective(&g, &t)
    };

    let aol = aol_diag(&g);
    let mut best: Vec<f64> = aol.iter().map(|v| v.ln()).collect();
    let mut best_obj = frobenius_objective(&g, &aol);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    for restart in 0..iters.max(1) {
        let mut cur = best.clone();
        if restart > 0 {
            // raising any entry keeps T - W^T W PSD
            for v in cur.iter_mut() {
                *v += rng.random_range(0.0..0.7);
            }
        }
        let mut cur_obj = objective(&cur);
        let mut step = 0.25;
        while step > 1e-7 {
            let mut moved = false;
            for i in 0..n {
                for dir in [-1.0, 1.0] {
                    let mut cand = cur.clone();
                    cand[i] += dir * step;
                    let obj = objective(&cand);
                    if obj < cur_obj && feasible(&cand)? {
                        cur = cand;
                        cur_obj = obj;
                        moved = true;
                        break;
                    }
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        if cur_obj < best_obj {
            best = cur;
            best_obj = cur_obj;
        }
    }
    let diag = best.iter().map(|v| v.exp()).collect();
    ScalingVector::certified(&g, diag, ScalingMethod::HeuristicOpt)
}
