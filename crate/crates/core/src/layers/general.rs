use crate::error::{dim_err, LipError, Result};
use crate::layers::ActivationKind;
use crate::tensor::{min_eig, DenseMatrix, PSD_RELATIVE_TOL};

/// Parameters of `h(x) = H x + G act(W^T x + b)`, with `Λ = diag(lambda)`.
///
/// Shapes: `x` in R^m, `W` m x n, `H` p x m, `G` p x n, `b` and `lambda` length n.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralLayerSpec {
    pub h_mat: DenseMatrix,
    pub g_mat: DenseMatrix,
    pub w: DenseMatrix,
    pub b: Vec<f64>,
    pub lambda: Vec<f64>,
    lmi_margin: f64,
    lmi_tolerance: f64,
}

impl GeneralLayerSpec {
    /// Validates shapes and `lambda >= 0`, then requires the LMI certificate to hold.
    pub fn new(
        h_mat: DenseMatrix,
        g_mat: DenseMatrix,
        w: DenseMatrix,
        b: Vec<f64>,
        lambda: Vec<f64>,
    ) -> Result<Self> {
        let spec = Self::uncertified(h_mat, g_mat, w, b, lambda)?;
        if !spec.is_certified() {
            return Err(LipError::LmiInfeasible { margin: spec.lmi_margin, tolerance: spec.lmi_tolerance });
        }
        Ok(spec)
    }

    /// Like [`GeneralLayerSpec::new`] but keeps an infeasible LMI, recording its margin.
    pub fn uncertified(
        h_mat: DenseMatrix,
        g_mat: DenseMatrix,
        w: DenseMatrix,
        b: Vec<f64>,
        lambda: Vec<f64>,
    ) -> Result<Self> {
        let (m, n) = w.shape();
        if h_mat.cols() != m || g_mat.cols() != n || h_mat.rows() != g_mat.rows() || b.len() != n || lambda.len() != n
        {
            return Err(dim_err(format!(
                "general layer: W {m}x{n}, H {:?}, G {:?}, |b| {}, |lambda| {}",
                h_mat.shape(),
                g_mat.shape(),
                b.len(),
                lambda.len()
            )));
        }
        if let Some((i, v)) = lambda.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(LipError::Domain(format!("lambda[{i}] = {v} must be non-negative")));
        }
        let block = lmi_block(&h_mat, &g_mat, &w, &lambda)?;
        let lmi_margin = min_eig(&block)?;
        let lmi_tolerance = PSD_RELATIVE_TOL * block.frobenius_norm().max(1.0);
        Ok(Self { h_mat, g_mat, w, b, lambda, lmi_margin, lmi_tolerance })
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.h_mat.rows()
    }

    pub fn lmi_margin(&self) -> f64 {
        self.lmi_margin
    }

    pub fn lmi_tolerance(&self) -> f64 {
        self.lmi_tolerance
    }

    pub fn is_certified(&self) -> bool {
        self.lmi_margin >= -self.lmi_tolerance
    }
}

/// `[[I - H^T H, -H^T G - W Λ], [-G^T H - Λ W^T, 2Λ - G^T G]]`.
fn lmi_block(h: &DenseMatrix, g: &DenseMatrix, w: &DenseMatrix, lambda: &[f64]) -> Result<DenseMatrix> {
    let m = w.rows();
    let top_left = DenseMatrix::identity(m).sub(&h.t_mul(h))?;
    let top_right = h.t_mul(g).add(&w.scale_cols(lambda))?.scale(-1.0);
    let bottom_left = top_right.transpose();
    let bottom_right = DenseMatrix::from_diag(&lambda.iter().map(|l| 2.0 * l).collect::<Vec<_>>()).sub(&g.t_mul(g))?;
    Ok(DenseMatrix::block2x2(&top_left, &top_right, &bottom_left, &bottom_right)?.symmetrize())
}

/// Smallest eigenvalue of the LMI block matrix; non-negative certifies 1-Lipschitz.
pub fn check_lmi(spec: &GeneralLayerSpec) -> Result<f64> {
    min_eig(&lmi_block(&spec.h_mat, &spec.g_mat, &spec.w, &spec.lambda)?)
}

/// `h(x) = H x + G act(W^T x + b)`.
pub fn general_forward(spec: &GeneralLayerSpec, kind: ActivationKind, x: &DenseMatrix) -> Result<DenseMatrix> {
    if !spec.is_certified() {
        return Err(LipError::LmiInfeasible { margin: spec.lmi_margin, tolerance: spec.lmi_tolerance });
    }
    if x.rows() != spec.in_dim() {
        return Err(dim_err(format!("input has {} rows, layer expects {}", x.rows(), spec.in_dim())));
    }
    let mut z = spec.w.t_mul(x);
    for (i, &bi) in spec.b.iter().enumerate() {
        z.row_mut(i).iter_mut().for_each(|v| *v += bi);
    }
    let a = kind.apply_matrix(&z);
    spec.h_mat.mul(x).add(&spec.g_mat.mul(&a))
}
