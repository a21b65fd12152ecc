use serde::{Deserialize, Serialize};

use crate::tensor::DenseMatrix;

/// Activations whose difference quotients lie in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[default]
    Relu,
    Tanh,
    Sigmoid,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 3] = [ActivationKind::Relu, ActivationKind::Tanh, ActivationKind::Sigmoid];

    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            ActivationKind::Relu => v.max(0.0),
            ActivationKind::Tanh => v.tanh(),
            ActivationKind::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative; the ReLU subgradient at 0 is 0.
    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
        }
    }

    pub fn apply_matrix(self, m: &DenseMatrix) -> DenseMatrix {
        m.map(|v| self.apply(v))
    }

    pub fn derivative_matrix(self, m: &DenseMatrix) -> DenseMatrix {
        m.map(|v| self.derivative(v))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
        }
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Elementwise activation of a vector.
pub fn act(kind: ActivationKind, v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| kind.apply(x)).collect()
}

/// Evaluates the incremental quadratic constraint
///
/// ```text
/// [d; s]^T [[0, -T^-1], [-T^-1, 2 T^-1]] [d; s] = 2 sum_i s_i (s_i - d_i) / T_i
/// ```
///
/// with `d = x1 - x2` and `s = act(x1) - act(x2)`. Slope restriction to
/// `[0, 1]` makes this non-positive for every pair.
pub fn slope_qc_residual(kind: ActivationKind, x1: &[f64], x2: &[f64], t: &[f64]) -> f64 {
    assert_eq!(x1.len(), x2.len());
    assert_eq!(x1.len(), t.len());
    x1.iter()
        .zip(x2)
        .zip(t)
        .map(|((&a, &b), &ti)| {
            let d = a - b;
            let s = kind.apply(a) - kind.apply(b);
            2.0 * s * (s - d) / ti
        })
        .sum()
}
