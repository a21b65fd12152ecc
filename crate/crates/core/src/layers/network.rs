use serde::Serialize;

use crate::error::{dim_err, LipError, Result};
use crate::layers::{
    general_forward, linear_apply, materialize_conv_matrix, residual_apply, ActivationKind, ConvGeometry,
    ConvKernel, GeneralLayerSpec, WeightSpec,
};
use crate::scaling::{t_aol, t_sll, t_sn, QVector, ScalingMethod, ScalingVector};
use crate::tensor::DenseMatrix;

/// One layer of a [`Network`] together with its certificate.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear { ws: WeightSpec, t: ScalingVector, q: Option<QVector> },
    Residual { ws: WeightSpec, t: ScalingVector, q: Option<QVector>, activation: ActivationKind },
    General { spec: GeneralLayerSpec, activation: ActivationKind },
    /// Residual form whose `W^T` is a materialized convolution.
    Conv {
        kernel: ConvKernel,
        geometry: ConvGeometry,
        ws: WeightSpec,
        t: ScalingVector,
        q: Option<QVector>,
        activation: ActivationKind,
    },
}

/// Per-layer certificate summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCertificate {
    pub layer: usize,
    pub form: &'static str,
    /// `min_eig(T - W^T W)`, or the LMI block's smallest eigenvalue for general layers.
    pub margin: f64,
    pub tolerance: f64,
    pub certified: bool,
}

pub(crate) fn scaling_for(w: &DenseMatrix, method: ScalingMethod, q: Option<&QVector>) -> Result<ScalingVector> {
    match method {
        ScalingMethod::Sn => t_sn(w),
        ScalingMethod::Aol => t_aol(w),
        ScalingMethod::Sll => match q {
            Some(q) => t_sll(w, q),
            None => t_sll(w, &QVector::ones(w.cols())),
        },
        other => Err(LipError::Domain(format!("layers cannot derive T with method {}", other.as_str()))),
    }
}

impl Layer {
    pub fn linear(ws: WeightSpec, method: ScalingMethod, q: Option<QVector>) -> Result<Self> {
        if ws.b.len() != ws.w.rows() {
            return Err(dim_err("linear bias must have one entry per output"));
        }
        let t = scaling_for(&ws.w, method, q.as_ref())?;
        Ok(Layer::Linear { ws, t, q })
    }

    pub fn residual(ws: WeightSpec, method: ScalingMethod, q: Option<QVector>, activation: ActivationKind) -> Result<Self> {
        if ws.b.len() != ws.w.cols() {
            return Err(dim_err("residual bias must have one entry per column of W"));
        }
        let t = scaling_for(&ws.w, method, q.as_ref())?;
        Ok(Layer::Residual { ws, t, q, activation })
    }

    /// Residual layer `x - 2 M^T T^{-1} act(M x + b)` with `M` the materialized convolution.
    pub fn conv(
        kernel: ConvKernel,
        geometry: ConvGeometry,
        bias: Vec<f64>,
        method: ScalingMethod,
        q: Option<QVector>,
        activation: ActivationKind,
    ) -> Result<Self> {
        let m = materialize_conv_matrix(&kernel, geometry.in_shape, geometry.padding, geometry.stride)?;
        let ws = WeightSpec::new(m.transpose(), bias)?;
        if ws.b.len() != ws.w.cols() {
            return Err(dim_err(format!("conv bias needs {} entries (one per output activation)", ws.w.cols())));
        }
        let t = scaling_for(&ws.w, method, q.as_ref())?;
        Ok(Layer::Conv { kernel, geometry, ws, t, q, activation })
    }

    pub fn general(spec: GeneralLayerSpec, activation: ActivationKind) -> Self {
        Layer::General { spec, activation }
    }

    pub fn form(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "linear",
            Layer::Residual { .. } => "residual",
            Layer::General { .. } => "general",
            Layer::Conv { .. } => "conv",
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Linear { ws, .. } => ws.w.cols(),
            Layer::Residual { ws, .. } | Layer::Conv { ws, .. } => ws.w.rows(),
            Layer::General { spec, .. } => spec.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Linear { ws, .. } => ws.w.rows(),
            Layer::Residual { ws, .. } | Layer::Conv { ws, .. } => ws.w.rows(),
            Layer::General { spec, .. } => spec.out_dim(),
        }
    }

    /// The scaling `T`, absent for general layers.
    pub fn scaling(&self) -> Option<&ScalingVector> {
        match self {
            Layer::Linear { t, .. } | Layer::Residual { t, .. } | Layer::Conv { t, .. } => Some(t),
            Layer::General { .. } => None,
        }
    }

    pub fn weights(&self) -> &DenseMatrix {
        match self {
            Layer::Linear { ws, .. } | Layer::Residual { ws, .. } | Layer::Conv { ws, .. } => &ws.w,
            Layer::General { spec, .. } => &spec.w,
        }
    }

    pub fn certificate(&self, index: usize) -> LayerCertificate {
        let (margin, tolerance, certified) = match self {
            Layer::Linear { t, .. } | Layer::Residual { t, .. } | Layer::Conv { t, .. } => {
                (t.feasibility_margin, t.tolerance, t.is_feasible())
            }
            Layer::General { spec, .. } => (spec.lmi_margin(), spec.lmi_tolerance(), spec.is_certified()),
        };
        LayerCertificate { layer: index, form: self.form(), margin, tolerance, certified }
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.in_dim() {
            return Err(dim_err(format!("{} layer expects {} rows, got {}", self.form(), self.in_dim(), x.rows())));
        }
        match self {
            Layer::Linear { ws, t, .. } => {
                t.ensure_feasible()?;
                Ok(linear_apply(&ws.w, &ws.b, &t.inv_sqrt(), x))
            }
            Layer::Residual { ws, t, activation, .. } | Layer::Conv { ws, t, activation, .. } => {
                t.ensure_feasible()?;
                Ok(residual_apply(&ws.w, &ws.b, &t.inv(), *activation, x))
            }
            Layer::General { spec, activation } => general_forward(spec, *activation, x),
        }
    }

    /// `J(x)^T upstream` for each sample column.
    pub fn input_vjp(&self, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.in_dim() || upstream.rows() != self.out_dim() || x.cols() != upstream.cols() {
            return Err(dim_err("input_vjp shapes disagree"));
        }
        match self {
            Layer::Linear { ws, t, .. } => Ok(ws.w.t_mul(upstream).scale_rows(&t.inv_sqrt())),
            Layer::Residual { ws, t, activation, .. } | Layer::Conv { ws, t, activation, .. } => {
                let t_inv: Vec<f64> = t.inv().iter().map(|v| -2.0 * v).collect();
                let dz = gated(&ws.w, &ws.b, *activation, x, &ws.w.t_mul(upstream).scale_rows(&t_inv));
                upstream.add(&ws.w.mul(&dz))
            }
            Layer::General { spec, activation } => {
                let dz = gated(&spec.w, &spec.b, *activation, x, &spec.g_mat.t_mul(upstream));
                spec.h_mat.t_mul(upstream).add(&spec.w.mul(&dz))
            }
        }
    }
}

/// `act'(W^T x + b) * grad`, elementwise.
fn gated(w: &DenseMatrix, b: &[f64], kind: ActivationKind, x: &DenseMatrix, grad: &DenseMatrix) -> DenseMatrix {
    let mut z = w.t_mul(x);
    for (i, &bi) in b.iter().enumerate() {
        z.row_mut(i).iter_mut().for_each(|v| *v += bi);
    }
    let mut out = grad.clone();
    out.data_mut().iter_mut().zip(z.data()).for_each(|(g, zv)| *g *= kind.derivative(*zv));
    out
}

/// A chain of layers. Inputs narrower than the first layer are zero-padded,
/// which is an isometric embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(dim_err("input dimension must be positive"));
        }
        if let Some(first) = layers.first() {
            if first.in_dim() < input_dim {
                return Err(dim_err(format!(
                    "first layer takes {} features but inputs have {input_dim}",
                    first.in_dim()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(dim_err(format!(
                    "layer {i} outputs {} features but layer {} takes {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::out_dim).unwrap_or(self.input_dim)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn embed(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.input_dim {
            return Err(dim_err(format!("network expects {} input rows, got {}", self.input_dim, x.rows())));
        }
        let target = self.layers.first().map(Layer::in_dim).unwrap_or(self.input_dim);
        if target == self.input_dim {
            return Ok(x.clone());
        }
        let mut padded = DenseMatrix::zeros(target, x.cols());
        for i in 0..x.rows() {
            padded.row_mut(i).copy_from_slice(x.row(i));
        }
        Ok(padded)
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut h = self.embed(x)?;
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Gradient of `sum(upstream * f(x))` with respect to `x`.
    pub fn input_vjp(&self, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = self.embed(x)?;
        for layer in &self.layers {
            let next = layer.forward(&h)?;
            inputs.push(h);
            h = next;
        }
        let mut g = upstream.clone();
        for (layer, input) in self.layers.iter().zip(&inputs).rev() {
            g = layer.input_vjp(input, &g)?;
        }
        if g.rows() == self.input_dim {
            Ok(g)
        } else {
            Ok(DenseMatrix::from_fn(self.input_dim, g.cols(), |i, j| g[(i, j)]))
        }
    }

    pub fn certificates(&self) -> Vec<LayerCertificate> {
        self.layers.iter().enumerate().map(|(i, l)| l.certificate(i)).collect()
    }

    /// Per-layer Lipschitz bounds: 1 for every certified layer.
    pub fn layer_bounds(&self) -> Result<Vec<f64>> {
        self.certificates()
            .into_iter()
            .map(|c| if c.certified { Ok(1.0) } else { Err(LipError::Certificate { layer: c.layer }) })
            .collect()
    }

    /// Product of the per-layer bounds.
    pub fn lipschitz_bound(&self) -> Result<f64> {
        Ok(self.layer_bounds()?.iter().product())
    }
}
