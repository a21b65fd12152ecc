//! 1-Lipschitz layers built from a feasible scaling `T`.
//!
//! Batches are matrices with one sample per column.
//!
//! | form | map |
//! |------|-----|
//! | linear | `g(x) = W T^{-1/2} x + b` |
//! | residual | `h(x) = x - 2 W T^{-1} act(W^T x + b)` |
//! | general | `h(x) = H x + G act(W^T x + b)` under an LMI certificate |
//! | conv | residual form on an explicitly materialized convolution |

mod activation;
mod conv;
mod dense;
mod general;
pub mod manifest;
mod network;

pub use activation::{act, slope_qc_residual, ActivationKind};
pub use conv::{materialize_conv_matrix, ConvGeometry, ConvKernel, CONV_MAX_DIM};
pub use dense::{
    linear_forward, nonresidual_gershgorin_backward, nonresidual_gershgorin_forward,
    residual_backward, residual_forward, LayerGrad, WeightSpec,
};
pub use general::{check_lmi, general_forward, GeneralLayerSpec};
pub use network::{Layer, Network};

pub(crate) use dense::{linear_apply, residual_apply};
