//! Natural gradient descent with exact per-layer Fisher-block inversion.
//!
//! Each layer's damped Fisher block `(JᵀJ/m + αI)` is inverted through the
//! Woodbury identity, which only needs the `m × m` Gram matrix `JJᵀ`. The
//! Gram is assembled from two small covariance factors of the cached layer
//! inputs and pre-activation derivatives, and the Jacobian products of the
//! update reuse the same cached values, so `J` is never materialized.

pub mod convlab;
pub mod fisher;
pub mod flops;
pub mod harness;
pub mod net;
pub mod optim;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
