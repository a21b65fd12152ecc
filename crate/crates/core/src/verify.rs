//! Certification: empirical Lipschitz estimates, certified radii and PGD attacks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LipError, Result};
use crate::layers::Network;
use crate::tensor::{norm2, DenseMatrix};

/// Perturbation scales used by [`empirical_lipschitz`].
pub const PERTURBATION_SCALES: [f64; 3] = [1e-3, 1e-1, 1.0];

/// Radii reported by default, matching common ℓ2 benchmarks.
pub const DEFAULT_RADII: [f64; 4] = [36.0 / 255.0, 72.0 / 255.0, 108.0 / 255.0, 1.0];

const CHUNK: usize = 256;

/// A batched map from `input_dim` features to logits with a global Lipschitz bound.
pub trait Model: Sync {
    fn input_dim(&self) -> usize;
    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix>;
    /// Gradient of `sum(upstream * f(x))` with respect to `x`.
    fn input_vjp(&self, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix>;
    fn layer_bounds(&self) -> Result<Vec<f64>>;

    fn lipschitz_bound(&self) -> Result<f64> {
        Ok(self.layer_bounds()?.iter().product())
    }
}

impl Model for Network {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }

    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Network::forward(self, x)
    }

    fn input_vjp(&self, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        Network::input_vjp(self, x, upstream)
    }

    fn layer_bounds(&self) -> Result<Vec<f64>> {
        Network::layer_bounds(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub layer_bounds: Vec<f64>,
    pub network_bound: f64,
    pub empirical_max_ratio: f64,
    pub pairs_sampled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCert {
    pub true_label: usize,
    pub predicted_label: usize,
    pub margin: f64,
    pub certified_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub per_sample: Vec<SampleCert>,
    pub radii_grid: Vec<f64>,
    pub certified_accuracy: Vec<f64>,
}

impl CertReport {
    pub fn natural_accuracy(&self) -> f64 {
        if self.per_sample.is_empty() {
            return 0.0;
        }
        let correct = self.per_sample.iter().filter(|s| s.predicted_label == s.true_label).count();
        correct as f64 / self.per_sample.len() as f64
    }
}

/// Largest ratio `|f(x) - f(y)| / |x - y|` over sampled pairs.
pub fn empirical_lipschitz(model: &dyn Model, pairs: usize, rng_seed: u64) -> Result<f64> {
    if pairs == 0 {
        return Err(LipError::Domain("pairs must be at least 1".into()));
    }
    let d = model.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut best = 0.0f64;
    let mut done = 0;
    while done < pairs {
        let n = (pairs - done).min(1024);
        let x = DenseMatrix::from_fn(d, n, |_, _| rng.sample(StandardNormal));
        let mut y = x.clone();
        for j in 0..n {
            let scale = PERTURBATION_SCALES[(done + j) % PERTURBATION_SCALES.len()];
            for i in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                y[(i, j)] += scale * e;
            }
        }
        let fx = model.forward(&x)?;
        let fy = model.forward(&y)?;
        for j in 0..n {
            let din = norm2(&x.sub(&y)?.column(j));
            if din == 0.0 {
                continue;
            }
            let dout = norm2(&fx.sub(&fy)?.column(j));
            best = best.max(dout / din);
        }
        done += n;
    }
    Ok(best)
}

pub fn lipschitz_report(model: &dyn Model, pairs: usize, rng_seed: u64) -> Result<LipschitzReport> {
    let layer_bounds = model.layer_bounds()?;
    let network_bound = layer_bounds.iter().product();
    let empirical_max_ratio = empirical_lipschitz(model, pairs, rng_seed)?;
    Ok(LipschitzReport { layer_bounds, network_bound, empirical_max_ratio, pairs_sampled: pairs })
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// `logit_true - max_{j != true} logit_j`; infinite for a single logit.
pub fn logit_margin(logits: &[f64], true_label: usize) -> f64 {
    let rival = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != true_label)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[true_label] - rival
}

/// `max(0, margin) / (sqrt(2) * lip_bound)`.
pub fn certified_radius(logits: &[f64], true_label: usize, lip_bound: f64) -> f64 {
    debug_assert!(lip_bound > 0.0);
    logit_margin(logits, true_label).max(0.0) / (std::f64::consts::SQRT_2 * lip_bound)
}

fn check_data(model: &dyn Model, inputs: &DenseMatrix, labels: &[usize]) -> Result<()> {
    if inputs.rows() != model.input_dim() {
        return Err(dim_err(format!("inputs have {} features, model expects {}", inputs.rows(), model.input_dim())));
    }
    if inputs.cols() != labels.len() {
        return Err(dim_err(format!("{} samples but {} labels", inputs.cols(), labels.len())));
    }
    Ok(())
}

fn chunks(n: usize) -> Vec<(usize, usize)> {
    (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect()
}

/// Per-sample margins and radii, and the certified accuracy at each radius.
///
/// A sample counts as certified at `r` when it is classified correctly and its radius exceeds `r`.
pub fn certify_dataset(model: &dyn Model, inputs: &DenseMatrix, labels: &[usize], radii: &[f64]) -> Result<CertReport> {
    check_data(model, inputs, labels)?;
    let lip = model.lipschitz_bound()?;
    let parts = chunks(labels.len())
        .into_par_iter()
        .map(|(s, e)| {
            let logits = model.forward(&inputs.columns(s, e))?;
            if let Some(&bad) = labels[s..e].iter().find(|&&l| l >= logits.rows()) {
                return Err(dim_err(format!("label {bad} out of range for {} classes", logits.rows())));
            }
            Ok((s..e)
                .map(|j| {
                    let col = logits.column(j - s);
                    let label = labels[j];
                    SampleCert {
                        true_label: label,
                        predicted_label: argmax(&col),
                        margin: logit_margin(&col, label),
                        certified_radius: certified_radius(&col, label, lip),
                    }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let per_sample: Vec<SampleCert> = parts.into_iter().flatten().collect();
    let n = per_sample.len().max(1) as f64;
    let certified_accuracy = radii
        .iter()
        .map(|&r| {
            per_sample.iter().filter(|s| s.predicted_label == s.true_label && s.certified_radius > r).count() as f64 / n
        })
        .collect();
    Ok(CertReport { per_sample, radii_grid: radii.to_vec(), certified_accuracy })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub steps: usize,
    pub restarts: usize,
    /// Step size is `step_factor * radius / steps`.
    pub step_factor: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self { steps: 50, restarts: 3, step_factor: 2.5 }
    }
}

fn softmax_ce_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().enumerate().map(|(i, e)| e / sum - if i == label { 1.0 } else { 0.0 }).collect()
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn project(delta: &mut [f64], radius: f64) {
    let n = norm2(delta);
    if n > radius {
        let s = radius / n;
        delta.iter_mut().for_each(|v| *v *= s);
    }
}

/// ℓ2 PGD on cross-entropy for a batch; `found[j]` is true iff a perturbation of norm
/// at most `radius` changed the prediction of sample `j` away from its label.
fn pgd_chunk(
    model: &dyn Model,
    x: &DenseMatrix,
    labels: &[usize],
    first_index: usize,
    radius: f64,
    cfg: &PgdConfig,
    seed: u64,
) -> Result<Vec<bool>> {
    let (d, n) = x.shape();
    let mut found = vec![false; n];
    let check = |adv: &DenseMatrix, found: &mut [bool]| -> Result<DenseMatrix> {
        let logits = model.forward(adv)?;
        for j in 0..n {
            if argmax(&logits.column(j)) != labels[j] {
                found[j] = true;
            }
        }
        Ok(logits)
    };
    check(x, &mut found)?;
    if radius <= 0.0 || cfg.steps == 0 {
        return Ok(found);
    }
    let alpha = cfg.step_factor * radius / cfg.steps as f64;
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|j| sample_rng(seed, first_index + j)).collect();
    for restart in 0..cfg.restarts.max(1) {
        // first restart starts at x, later ones uniformly inside the ball
        let mut delta = DenseMatrix::zeros(d, n);
        if restart > 0 {
            for (j, rng) in rngs.iter_mut().enumerate() {
                let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let nv = norm2(&v).max(f64::MIN_POSITIVE);
                let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
                v.iter_mut().for_each(|e| *e *= r / nv);
                delta.set_column(j, &v);
            }
        }
        for _ in 0..cfg.steps {
            if found.iter().all(|f| *f) {
                return Ok(found);
            }
            let adv = x.add(&delta)?;
            let logits = check(&adv, &mut found)?;
            let mut up = DenseMatrix::zeros(logits.rows(), n);
            for j in 0..n {
                up.set_column(j, &softmax_ce_grad(&logits.column(j), labels[j]));
            }
            let grad = model.input_vjp(&adv, &up)?;
            for j in 0..n {
                let g = grad.column(j);
                let gn = norm2(&g);
                if gn == 0.0 || !gn.is_finite() {
                    continue;
                }
                let mut dj = delta.column(j);
                dj.iter_mut().zip(&g).for_each(|(v, gi)| *v += alpha * gi / gn);
                project(&mut dj, radius);
                delta.set_column(j, &dj);
            }
        }
        check(&x.add(&delta)?, &mut found)?;
    }
    Ok(found)
}

/// PGD attack on every column of `inputs`, parallel over fixed chunks.
/// Each sample draws from its own random stream, so results do not depend on the thread count.
pub fn pgd_attack_batch(
    model: &dyn Model,
    inputs: &DenseMatrix,
    labels: &[usize],
    radius: f64,
    cfg: &PgdConfig,
    rng_seed: u64,
) -> Result<Vec<bool>> {
    check_data(model, inputs, labels)?;
    if !(radius >= 0.0) {
        return Err(LipError::Domain(format!("radius {radius} must be non-negative")));
    }
    let parts = chunks(labels.len())
        .into_par_iter()
        .map(|(s, e)| pgd_chunk(model, &inputs.columns(s, e), &labels[s..e], s, radius, cfg, rng_seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// True iff a misclassifying perturbation within `radius` was found for `x`.
pub fn pgd_attack(
    model: &dyn Model,
    x: &[f64],
    true_label: usize,
    radius: f64,
    cfg: &PgdConfig,
    rng_seed: u64,
) -> Result<bool> {
    let input = DenseMatrix::column_vector(x)?;
    Ok(pgd_attack_batch(model, &input, &[true_label], radius, cfg, rng_seed)?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessEntry {
    pub radius: f64,
    pub certified: usize,
    pub attacked: usize,
    /// Samples both certified at `radius` and successfully attacked within it.
    pub violations: usize,
}

/// Attacks every sample at every radius and counts certified samples that were broken.
pub fn soundness_check(
    model: &dyn Model,
    inputs: &DenseMatrix,
    labels: &[usize],
    radii: &[f64],
    cfg: &PgdConfig,
    rng_seed: u64,
) -> Result<Vec<SoundnessEntry>> {
    let report = certify_dataset(model, inputs, labels, radii)?;
    radii
        .iter()
        .map(|&r| {
            let attacked = pgd_attack_batch(model, inputs, labels, r, cfg, rng_seed)?;
            let certified: Vec<bool> = report
                .per_sample
                .iter()
                .map(|s| s.predicted_label == s.true_label && s.certified_radius > r)
                .collect();
            Ok(SoundnessEntry {
                radius: r,
                certified: certified.iter().filter(|c| **c).count(),
                attacked: attacked.iter().filter(|a| **a).count(),
                violations: certified.iter().zip(&attacked).filter(|(c, a)| **c && **a).count(),
            })
        })
        .collect()
}
