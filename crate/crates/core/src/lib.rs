//! Maximum mean discrepancy (MMD) as a differentiable penalty for learning
//! representations that do not depend on a nuisance factor: the domain a
//! sample came from, the corruption applied to it, or the gap between model
//! samples and data.
//!
//! Layout:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` matrices and a define-by-run tape.
//! - [`kernels`]: linear/Gaussian kernels, biased MMD, the multi-domain
//!   penalty, the permutation test and the median bandwidth heuristic.
//! - [`network`]: feedforward networks, SGD with momentum, AdaGrad, checkpoints.
//! - [`data`]: IDX and bag-of-words loaders, TF-IDF, splits, corruption,
//!   synthetic datasets.
//! - [`experiments`]: the domain adaptation, invariant feature, autoencoder
//!   and moment-matching generator trainers.
//! - [`probe`]: accuracy, the clean-vs-noisy linear probe, PCA.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod network;
pub mod probe;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
