//! Desk-scale training of residual SLL stacks with a linear SLL head.

use std::f64::consts::{PI, SQRT_2};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LipError, Result};
use crate::layers::{
    nonresidual_gershgorin_backward, residual_backward, ActivationKind, Layer, Network, WeightSpec,
};
use crate::scaling::{ortho_distance, sll_diag, t_sll, QVector, ScalingMethod};
use crate::tensor::{gram, orthonormal_columns, DenseMatrix};
use crate::verify::{argmax, certify_dataset, CertReport, Model};

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeasibilityCheck {
    Epoch,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub width: usize,
    pub depth: usize,
    pub activation: ActivationKind,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { width: 64, depth: 3, activation: ActivationKind::Relu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub temperature: f64,
    pub offset: f64,
    pub seed: u64,
    /// `(fraction of all steps, lr multiplier)` breakpoints, interpolated linearly.
    pub lr_schedule: Vec<(f64, f64)>,
    pub model: ModelSpec,
    pub feasibility_check: FeasibilityCheck,
    /// Radius at which the per-epoch certified accuracy is recorded.
    pub history_radius: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr: 0.01,
            beta1: 0.5,
            beta2: 0.9,
            temperature: 0.25,
            offset: 1.5 * SQRT_2,
            seed: 0,
            lr_schedule: vec![(0.0, 0.0), (0.1, 1.0), (1.0, 0.0)],
            model: ModelSpec::default(),
            feasibility_check: FeasibilityCheck::Epoch,
            history_radius: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| LipError::Parse { line: e.line(), message: e.to_string() })?;
        cfg.validate().map_err(|e| LipError::Parse { line: 0, message: e.to_string() })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LipError::Domain(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.offset >= 0.0 && self.offset.is_finite()) {
            return bad("offset must be non-negative");
        }
        if !(self.history_radius >= 0.0 && self.history_radius.is_finite()) {
            return bad("history_radius must be non-negative");
        }
        if self.model.width == 0 {
            return bad("model width must be positive");
        }
        let s = &self.lr_schedule;
        if s.len() < 2 || s[0].0 != 0.0 || s[s.len() - 1].0 != 1.0 {
            return bad("lr_schedule must start at fraction 0 and end at 1");
        }
        if s.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return bad("lr_schedule fractions must increase");
        }
        if s.iter().any(|(_, m)| !(*m >= 0.0 && m.is_finite())) {
            return bad("lr_schedule multipliers must be non-negative");
        }
        Ok(())
    }

    /// Learning rate at a fraction of training in `[0, 1]`.
    pub fn lr_at(&self, frac: f64) -> f64 {
        let s = &self.lr_schedule;
        let frac = frac.clamp(0.0, 1.0);
        let k = s.windows(2).position(|w| frac <= w[1].0).unwrap_or(s.len() - 2);
        let ((f0, m0), (f1, m1)) = (s[k], s[k + 1]);
        self.lr * (m0 + (m1 - m0) * (frac - f0) / (f1 - f0))
    }
}

/// Inputs with one sample per column, labels, and a train/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl Dataset {
    /// Every sample goes to the test split.
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.cols() != labels.len() {
            return Err(dim_err(format!("{} samples but {} labels", inputs.cols(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(LipError::Domain(format!("label {bad} out of range for {num_classes} classes")));
        }
        let test_idx = (0..labels.len()).collect();
        Ok(Self { inputs, labels, num_classes, train_idx: Vec::new(), test_idx })
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.rows()
    }

    /// Columns `idx` and their labels; `idx` must be non-empty.
    fn subset(&self, idx: &[usize]) -> (DenseMatrix, Vec<usize>) {
        let mut x = DenseMatrix::zeros(self.inputs.rows(), idx.len());
        for (k, &j) in idx.iter().enumerate() {
            x.set_column(k, &self.inputs.column(j));
        }
        (x, idx.iter().map(|&j| self.labels[j]).collect())
    }

    pub fn train(&self) -> (DenseMatrix, Vec<usize>) {
        self.subset(&self.train_idx)
    }

    pub fn test(&self) -> (DenseMatrix, Vec<usize>) {
        self.subset(&self.test_idx)
    }
}

/// Two interleaved half-circles with Gaussian noise, shuffled and split 80/20.
pub fn make_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(LipError::Domain(format!("two moons needs a positive even n, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(LipError::Domain("noise must be non-negative".into()));
    }
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DenseMatrix::zeros(2, n);
    let mut labels = vec![0; n];
    for k in 0..half {
        let t = if half == 1 { 0.0 } else { PI * k as f64 / (half - 1) as f64 };
        x[(0, k)] = t.cos();
        x[(1, k)] = t.sin();
        x[(0, half + k)] = 1.0 - t.cos();
        x[(1, half + k)] = 0.5 - t.sin();
        labels[half + k] = 1;
    }
    if noise > 0.0 {
        for v in x.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += noise * e;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n * 4 / 5;
    Ok(Dataset {
        inputs: x,
        labels,
        num_classes: 2,
        train_idx: order[..n_train].to_vec(),
        test_idx: order[n_train..].to_vec(),
    })
}

/// Softmax cross-entropy on `(logits - offset * e_label) / temperature`; returns the loss and its gradient.
pub fn margin_ce_loss(logits: &[f64], label: usize, temperature: f64, offset: f64) -> (f64, Vec<f64>) {
    let z: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, v)| (v - if i == label { offset } else { 0.0 }) / temperature)
        .collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let loss = max + sum.ln() - z[label];
    let grad = exp
        .iter()
        .enumerate()
        .map(|(i, e)| (e / sum - if i == label { 1.0 } else { 0.0 }) / temperature)
        .collect();
    (loss, grad)
}

/// Trainable parameters of one SLL layer; `q = exp(log_q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SllParams {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
    pub log_q: Vec<f64>,
}

impl SllParams {
    fn q(&self) -> Vec<f64> {
        self.log_q.iter().map(|v| v.exp()).collect()
    }

    fn q_vector(&self) -> QVector {
        QVector::from_log(&self.log_q).expect("exp of a finite value is positive")
    }

    fn weight_spec(&self) -> WeightSpec {
        WeightSpec { w: self.w.clone(), b: self.b.clone() }
    }

    fn t_inv(&self) -> Vec<f64> {
        sll_diag(&gram(&self.w), &self.q()).iter().map(|v| 1.0 / v).collect()
    }
}

/// Residual SLL blocks followed by a linear SLL head; inputs are zero-padded to `width`.
#[derive(Debug, Clone, PartialEq)]
pub struct SllModel {
    pub input_dim: usize,
    pub activation: ActivationKind,
    pub blocks: Vec<SllParams>,
    pub head: SllParams,
}

struct Cache {
    inputs: Vec<DenseMatrix>,
    head_input: DenseMatrix,
}

impl SllModel {
    /// Orthonormal weights, zero biases, `q = 1`.
    pub fn init(input_dim: usize, num_classes: usize, spec: &ModelSpec, seed: u64) -> Result<Self> {
        if input_dim == 0 || input_dim > spec.width {
            return Err(dim_err(format!("input dimension {input_dim} must be in 1..={}", spec.width)));
        }
        if num_classes < 2 {
            return Err(LipError::Domain("need at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |r: usize, c: usize| DenseMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal));
        let width = spec.width;
        let blocks = (0..spec.depth)
            .map(|_| {
                Ok(SllParams {
                    w: orthonormal_columns(&gaussian(width, width))?,
                    b: vec![0.0; width],
                    log_q: vec![0.0; width],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head_w = if num_classes <= width {
            orthonormal_columns(&gaussian(width, num_classes))?.transpose()
        } else {
            orthonormal_columns(&gaussian(num_classes, width))?
        };
        let head = SllParams { w: head_w, b: vec![0.0; num_classes], log_q: vec![0.0; width] };
        Ok(Self { input_dim, activation: spec.activation, blocks, head })
    }

    pub fn width(&self) -> usize {
        self.head.w.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.head.w.rows()
    }

    fn pad(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut h = DenseMatrix::zeros(self.width(), x.cols());
        for i in 0..x.rows() {
            h.row_mut(i).copy_from_slice(x.row(i));
        }
        h
    }

    fn forward_cached(&self, x: &DenseMatrix) -> (DenseMatrix, Cache) {
        let mut h = self.pad(x);
        let mut inputs = Vec::with_capacity(self.blocks.len());
        for p in &self.blocks {
            let next = crate::layers::residual_apply(&p.w, &p.b, &p.t_inv(), self.activation, &h);
            inputs.push(h);
            h = next;
        }
        let scale: Vec<f64> = self.head.t_inv().iter().map(|v| v.sqrt()).collect();
        let logits = crate::layers::linear_apply(&self.head.w, &self.head.b, &scale, &h);
        (logits, Cache { inputs, head_input: h })
    }

    pub fn logits(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.input_dim {
            return Err(dim_err(format!("model expects {} input rows, got {}", self.input_dim, x.rows())));
        }
        Ok(self.forward_cached(x).0)
    }

    /// Certified network with the same function; fails with the index of the first infeasible layer.
    pub fn to_network(&self) -> Result<Network> {
        let mut layers = Vec::with_capacity(self.blocks.len() + 1);
        for (i, p) in self.blocks.iter().enumerate() {
            let layer = Layer::residual(p.weight_spec(), ScalingMethod::Sll, Some(p.q_vector()), self.activation)
                .map_err(|_| LipError::Certificate { layer: i })?;
            layers.push(layer);
        }
        let head = Layer::linear(self.head.weight_spec(), ScalingMethod::Sll, Some(self.head.q_vector()))
            .map_err(|_| LipError::Certificate { layer: self.blocks.len() })?;
        layers.push(head);
        Network::new(self.input_dim, layers)
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for p in self.blocks.iter_mut().chain(std::iter::once(&mut self.head)) {
            out.push(p.w.data_mut());
            out.push(p.b.as_mut_slice());
            out.push(p.log_q.as_mut_slice());
        }
        out
    }

    /// Mean loss over the batch and gradients aligned with `params_mut`.
    fn loss_and_grad(&self, x: &DenseMatrix, labels: &[usize], cfg: &TrainConfig) -> Result<(f64, Vec<Vec<f64>>)> {
        let (logits, cache) = self.forward_cached(x);
        let n = labels.len() as f64;
        let mut up = DenseMatrix::zeros(logits.rows(), logits.cols());
        let mut total = 0.0;
        for (j, &label) in labels.iter().enumerate() {
            let (loss, grad) = margin_ce_loss(&logits.column(j), label, cfg.temperature, cfg.offset);
            total += loss;
            up.set_column(j, &grad.iter().map(|g| g / n).collect::<Vec<_>>());
        }
        if !total.is_finite() {
            return Err(LipError::NonFinite);
        }
        let log_q_grad = |p: &SllParams, d_q: &[f64]| -> Vec<f64> {
            p.q().iter().zip(d_q).map(|(q, d)| q * d).collect()
        };
        let mut grads = Vec::new();
        let hg = nonresidual_gershgorin_backward(&self.head.weight_spec(), &self.head.q_vector(), &cache.head_input, &up)?;
        let mut head_grads = vec![hg.d_w.into_vec(), hg.d_b, log_q_grad(&self.head, &hg.d_q)];
        let mut upstream = hg.d_x;
        for (p, input) in self.blocks.iter().zip(&cache.inputs).rev() {
            let g = residual_backward(&p.weight_spec(), &p.q_vector(), self.activation, input, &upstream)?;
            upstream = g.d_x;
            grads.push(vec![g.d_w.into_vec(), g.d_b, log_q_grad(p, &g.d_q)]);
        }
        grads.reverse();
        grads.push(std::mem::take(&mut head_grads));
        Ok((total / n, grads.into_iter().flatten().collect()))
    }

    /// Frobenius orthogonality metric of every layer for the trained `q` and for `q = 1`.
    pub fn ortho_comparison(&self) -> Result<Vec<(f64, f64)>> {
        self.blocks
            .iter()
            .chain(std::iter::once(&self.head))
            .map(|p| {
                let trained = ortho_distance(&p.w, &t_sll(&p.w, &p.q_vector())?)?.1;
                let ones = ortho_distance(&p.w, &t_sll(&p.w, &QVector::ones(p.w.cols()))?)?.1;
                Ok((trained, ones))
            })
            .collect()
    }
}

impl Model for SllModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.logits(x)
    }

    fn input_vjp(&self, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        self.to_network()?.input_vjp(x, upstream)
    }

    fn layer_bounds(&self) -> Result<Vec<f64>> {
        self.to_network()?.layer_bounds()
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(shapes: &[&mut [f64]]) -> Self {
        let zeros: Vec<Vec<f64>> = shapes.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    fn update(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64) {
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (k, p) in params.into_iter().enumerate() {
            for (i, theta) in p.iter_mut().enumerate() {
                let g = grads[k][i];
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *theta -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub nat_acc: f64,
    pub cert_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SllModel,
    pub network: Network,
    pub history: Vec<EpochRecord>,
}

/// `epoch,loss,nat_acc,cert_acc_<radius>` rows.
pub fn history_csv(history: &[EpochRecord], radius: f64) -> String {
    let mut out = format!("epoch,loss,nat_acc,cert_acc_{radius}\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.nat_acc, r.cert_acc));
    }
    out
}

/// Natural accuracy and the certification report.
pub fn evaluate(model: &dyn Model, inputs: &DenseMatrix, labels: &[usize], radii: &[f64]) -> Result<(f64, CertReport)> {
    let report = certify_dataset(model, inputs, labels, radii)?;
    Ok((report.natural_accuracy(), report))
}

/// Trains `model` on the train split; history accuracies are measured on the test split.
pub fn train(model: SllModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.input_dim() != model.input_dim || data.num_classes != model.num_classes() {
        return Err(dim_err("dataset does not match the model's input or class count"));
    }
    if data.train_idx.is_empty() {
        return Err(LipError::Domain("training split is empty".into()));
    }
    let mut model = model;
    let mut adam = Adam::new(&model.params_mut());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let test = (!data.test_idx.is_empty()).then(|| data.test());
    let batches_per_epoch = data.train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as f64;
    let mut order = data.train_idx.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = data.subset(batch);
            let (loss, grads) = model.loss_and_grad(&x, &y, cfg)?;
            loss_sum += loss * batch.len() as f64;
            let lr = cfg.lr_at((step as f64 + 0.5) / total_steps);
            adam.update(model.params_mut(), &grads, lr, cfg.beta1, cfg.beta2);
            step += 1;
            if cfg.feasibility_check == FeasibilityCheck::Step {
                model.to_network()?;
            }
        }
        let network = model.to_network()?;
        let loss = loss_sum / order.len() as f64;
        let (nat_acc, cert_acc) = match &test {
            Some((x, y)) => {
                let (nat, rep) = evaluate(&network, x, y, &[cfg.history_radius])?;
                (nat, rep.certified_accuracy[0])
            }
            None => (f64::NAN, f64::NAN),
        };
        if !loss.is_finite() {
            return Err(LipError::NonFinite);
        }
        history.push(EpochRecord { epoch: epoch + 1, loss, nat_acc, cert_acc });
    }
    let network = model.to_network()?;
    Ok(TrainOutcome { model, network, history })
}

/// Fraction of correct predictions of `model` on `(x, labels)`.
pub fn accuracy(model: &dyn Model, x: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    let logits = model.forward(x)?;
    let correct = (0..labels.len()).filter(|&j| argmax(&logits.column(j)) == labels[j]).count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}
