//! Constructing, training and certifying 1-Lipschitz layers.
//!
//! Every layer here is built from a diagonal scaling `T` that satisfies
//! `W^T W <= T` (in the semidefinite order). [`scaling`] computes the
//! analytic choices of `T`, [`layers`] turns them into linear, residual,
//! general and convolutional layers, [`verify`] certifies robustness, and
//! [`trainer`] fits small residual stacks on synthetic data.

pub mod error;
pub mod layers;
pub mod scaling;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{LipError, Result};
