//! Per-layer Fisher blocks: Gram matrices by covariance factorization,
//! Woodbury solves, and Jacobian products from cached layer values.
//!
//! For a layer with per-sample Jacobian `J` (`m × p`), the damped block
//! inverse applied to a gradient is
//!
//! ```text
//! (JᵀJ/m + αI)⁻¹ g = (1/α)(g − (1/m)·Jᵀ(JJᵀ/m + αI)⁻¹·J·g)
//! ```
//!
//! so only the `m × m` Gram `JJᵀ` needs factoring, and `J` only appears in
//! products that [`LayerJacobian`] evaluates from `𝓘`, `𝓖` directly.

mod block;
mod cost;
mod factor;
mod general;
mod oracle;
mod products;

pub use block::{refresh_policy, woodbury_direction, DampedGram, FisherBlock, RefreshDecision, StaleReuse};
pub use cost::{flop_report, FlopReport, LayerDims};
pub use factor::{
    conv_covariance_tensors, covfactor_conv, covfactor_conv_samples, covfactor_dense, reduce_covariance_tensors,
    stack_samples, DenseFactors,
};
pub use general::{covfactor_general, general_unfold, GeneralLayerSchema};
pub use oracle::{dense_block_inverse, dense_damped_fisher, dense_direction, explicit_gram};
pub use products::{jvp_conv, jvp_dense, vjp_conv, vjp_dense, with_corrupted_vjp, LayerJacobian};

use crate::net::NetError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FisherError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(
        "damped Gram is not positive definite (pivot {pivot:e} at row {index}) with α = {alpha}; raise the damping"
    )]
    Damping { alpha: f64, index: usize, pivot: f64 },
    #[error("damping must be positive and finite, got {0}")]
    InvalidDamping(f64),
    #[error("invalid layer schema: {0}")]
    Schema(String),
    #[error("Gram factor covers {factor} samples but the current batch has {current}")]
    BatchMismatch { factor: usize, current: usize },
    #[error("layer has {size} parameters, above the dense oracle cap of {cap}")]
    TooLarge { size: usize, cap: usize },
}

pub type Result<T> = std::result::Result<T, FisherError>;
