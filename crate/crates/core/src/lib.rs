//! Targeted gradient descent for convolutional denoisers.
//!
//! Redundant feature maps are found with kernel sparsity and entropy (KSE)
//! scores; only the kernels that produce them are retrained, while every
//! other weight, batch-norm parameter and running statistic stays
//! bit-identical. The crate bundles everything needed to exercise that on
//! synthetic Poisson-noise phantoms: the layer math, a small residual
//! denoiser, training protocols (including Noise2Noise online adaptation)
//! and ensemble evaluation metrics.

pub mod error;
pub mod kse;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod phantom;
pub mod store;
pub mod tensor;
pub mod train;
pub mod weights;

#[cfg(test)]
mod testutil;

pub use error::{Result, TgdError};
pub use model::{build_network, Network, NetworkConfig};
pub use tensor::{Scalar, Tensor};
