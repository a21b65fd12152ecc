use crate::error::{dim_err, Result};
use crate::layers::ActivationKind;
use crate::scaling::{sll_diag, t_sll, QVector, ScalingVector};
use crate::tensor::{gram, DenseMatrix};

/// Weight matrix `W` (m x n) and bias for one layer.
///
/// The bias has length `m` for the linear form and `n` for the residual form.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

impl WeightSpec {
    pub fn new(w: DenseMatrix, b: Vec<f64>) -> Result<Self> {
        if b.iter().any(|v| !v.is_finite()) {
            return Err(crate::LipError::NonFinite);
        }
        Ok(Self { w, b })
    }

    /// Zero bias sized for the residual form.
    pub fn residual_zero_bias(w: DenseMatrix) -> Self {
        let n = w.cols();
        Self { w, b: vec![0.0; n] }
    }

    /// Zero bias sized for the linear form.
    pub fn linear_zero_bias(w: DenseMatrix) -> Self {
        let m = w.rows();
        Self { w, b: vec![0.0; m] }
    }
}

/// Gradients of one layer; shapes mirror the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub d_w: DenseMatrix,
    pub d_b: Vec<f64>,
    /// Gradient with respect to `q` (not `log q`); empty when the layer has no `q`.
    pub d_q: Vec<f64>,
    pub d_x: DenseMatrix,
}

fn add_bias_rows(m: &mut DenseMatrix, b: &[f64]) {
    for (i, &bi) in b.iter().enumerate() {
        m.row_mut(i).iter_mut().for_each(|v| *v += bi);
    }
}

fn row_sums(m: &DenseMatrix) -> Vec<f64> {
    (0..m.rows()).map(|i| m.row(i).iter().sum()).collect()
}

/// `W diag(scale) x + b` with no validation.
pub(crate) fn linear_apply(w: &DenseMatrix, b: &[f64], scale: &[f64], x: &DenseMatrix) -> DenseMatrix {
    let mut y = w.mul(&x.scale_rows(scale));
    add_bias_rows(&mut y, b);
    y
}

/// `x - 2 W diag(t_inv) act(W^T x + b)` with no validation.
///
/// Evaluated as `x + G a` with `G = -2 W T^{-1}`, the same arithmetic as the
/// general form, so the two agree bit for bit.
pub(crate) fn residual_apply(
    w: &DenseMatrix,
    b: &[f64],
    t_inv: &[f64],
    kind: ActivationKind,
    x: &DenseMatrix,
) -> DenseMatrix {
    let mut z = w.t_mul(x);
    add_bias_rows(&mut z, b);
    let a = kind.apply_matrix(&z);
    let g = w.scale_cols(&t_inv.iter().map(|v| -2.0 * v).collect::<Vec<_>>());
    let mut y = x.clone();
    let ga = g.mul(&a);
    y.data_mut().iter_mut().zip(ga.data()).for_each(|(yv, v)| *yv += v);
    y
}

/// `g(x) = W T^{-1/2} x + b`.
pub fn linear_forward(ws: &WeightSpec, t: &ScalingVector, x: &DenseMatrix) -> Result<DenseMatrix> {
    t.ensure_feasible()?;
    let (m, n) = ws.w.shape();
    if t.len() != n || x.rows() != n || ws.b.len() != m {
        return Err(dim_err(format!(
            "linear layer W {m}x{n}, |T| {}, |b| {}, input rows {}",
            t.len(),
            ws.b.len(),
            x.rows()
        )));
    }
    Ok(linear_apply(&ws.w, &ws.b, &t.inv_sqrt(), x))
}

/// `h(x) = x - 2 W T^{-1} act(W^T x + b)`.
pub fn residual_forward(
    ws: &WeightSpec,
    t: &ScalingVector,
    kind: ActivationKind,
    x: &DenseMatrix,
) -> Result<DenseMatrix> {
    t.ensure_feasible()?;
    let (m, n) = ws.w.shape();
    if t.len() != n || x.rows() != m || ws.b.len() != n {
        return Err(dim_err(format!(
            "residual layer W {m}x{n}, |T| {}, |b| {}, input rows {}",
            t.len(),
            ws.b.len(),
            x.rows()
        )));
    }
    Ok(residual_apply(&ws.w, &ws.b, &t.inv(), kind, x))
}

/// Linear layer scaled by the SLL diagonal, `W T^{-1/2} x + b` with `T = t_sll(W, q)`.
pub fn nonresidual_gershgorin_forward(ws: &WeightSpec, q: &QVector, x: &DenseMatrix) -> Result<DenseMatrix> {
    let t = t_sll(&ws.w, q)?;
    linear_forward(ws, &t, x)
}

/// Pulls a gradient on `T = sll_diag(G, q)` back to `G` (entrywise) and `q`.
///
/// `|.|` is differentiated with `sign(0) = 0`.
fn sll_diag_vjp(g: &DenseMatrix, q: &[f64], t: &[f64], d_t: &[f64]) -> (DenseMatrix, Vec<f64>) {
    let n = g.rows();
    let mut d_g = DenseMatrix::zeros(n, n);
    let mut d_q = vec![0.0; n];
    for i in 0..n {
        let scale = d_t[i] / q[i];
        for j in 0..n {
            let gij = g[(i, j)];
            let sign = if gij > 0.0 {
                1.0
            } else if gij < 0.0 {
                -1.0
            } else {
                0.0
            };
            d_g[(i, j)] = scale * sign * q[j];
            d_q[j] += scale * gij.abs();
        }
        d_q[i] -= d_t[i] * t[i] / q[i];
    }
    (d_g, d_q)
}

/// Adds `W (dG + dG^T)` to `d_w`: the pullback of `G = W^T W`.
fn accumulate_gram_vjp(w: &DenseMatrix, d_g: &DenseMatrix, d_w: &mut DenseMatrix) {
    let sym = d_g.add(&d_g.transpose()).expect("square");
    let contrib = w.mul(&sym);
    d_w.data_mut().iter_mut().zip(contrib.data()).for_each(|(a, b)| *a += b);
}

fn check_residual_shapes(ws: &WeightSpec, q: &QVector, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<()> {
    let (m, n) = ws.w.shape();
    if q.len() != n || ws.b.len() != n || x.rows() != m || upstream.shape() != x.shape() {
        return Err(dim_err("residual backward shapes disagree"));
    }
    Ok(())
}

/// Reverse-mode gradients of the residual SLL layer
/// `h(x) = x - 2 W T^{-1} act(W^T x + b)` with `T = sll_diag(W^T W, q)`.
///
/// Gradients flow through `T`'s dependence on both `W` and `q`; `upstream`
/// is `dL/dh` for each sample and the parameter gradients are summed over
/// the batch.
pub fn residual_backward(
    ws: &WeightSpec,
    q: &QVector,
    kind: ActivationKind,
    x: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<LayerGrad> {
    check_residual_shapes(ws, q, x, upstream)?;
    let w = &ws.w;
    let n = w.cols();
    let g = gram(w);
    let t = sll_diag(&g, q.as_slice());
    let t_inv: Vec<f64> = t.iter().map(|v| 1.0 / v).collect();

    let mut z = w.t_mul(x);
    add_bias_rows(&mut z, &ws.b);
    let a = kind.apply_matrix(&z);
    let u = a.scale_rows(&t_inv);

    let du = w.t_mul(upstream).scale(-2.0);
    let mut d_w = upstream.mul_t(&u).scale(-2.0);
    let mut d_x = upstream.clone();

    let mut d_t = vec![0.0; n];
    for i in 0..n {
        let s: f64 = du.row(i).iter().zip(a.row(i)).map(|(d, av)| d * av).sum();
        d_t[i] = -s * t_inv[i] * t_inv[i];
    }
    let da = du.scale_rows(&t_inv);
    let dz = DenseMatrix::from_vec(
        da.rows(),
        da.cols(),
        da.data().iter().zip(z.data()).map(|(d, zv)| d * kind.derivative(*zv)).collect(),
    )?;
    let d_b = row_sums(&dz);
    let xz = x.mul_t(&dz);
    d_w.data_mut().iter_mut().zip(xz.data()).for_each(|(a, b)| *a += b);
    let wdz = w.mul(&dz);
    d_x.data_mut().iter_mut().zip(wdz.data()).for_each(|(a, b)| *a += b);

    let (d_g, d_q) = sll_diag_vjp(&g, q.as_slice(), &t, &d_t);
    accumulate_gram_vjp(w, &d_g, &mut d_w);
    Ok(LayerGrad { d_w, d_b, d_q, d_x })
}

/// Reverse-mode gradients of `g(x) = W T^{-1/2} x + b` with `T = sll_diag(W^T W, q)`.
pub fn nonresidual_gershgorin_backward(
    ws: &WeightSpec,
    q: &QVector,
    x: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<LayerGrad> {
    let w = &ws.w;
    let (m, n) = w.shape();
    if q.len() != n || ws.b.len() != m || x.rows() != n || upstream.rows() != m || upstream.cols() != x.cols() {
        return Err(dim_err("linear backward shapes disagree"));
    }
    let g = gram(w);
    let t = sll_diag(&g, q.as_slice());
    let s: Vec<f64> = t.iter().map(|v| 1.0 / v.sqrt()).collect();
    let v = x.scale_rows(&s);

    let mut d_w = upstream.mul_t(&v);
    let d_b = row_sums(upstream);
    let dv = w.t_mul(upstream);
    let d_x = dv.scale_rows(&s);
    let d_t: Vec<f64> = (0..n)
        .map(|i| {
            let ds: f64 = dv.row(i).iter().zip(x.row(i)).map(|(a, b)| a * b).sum();
            -0.5 * ds * s[i] / t[i]
        })
        .collect();
    let (d_g, d_q) = sll_diag_vjp(&g, q.as_slice(), &t, &d_t);
    accumulate_gram_vjp(w, &d_g, &mut d_w);
    Ok(LayerGrad { d_w, d_b, d_q, d_x })
}
