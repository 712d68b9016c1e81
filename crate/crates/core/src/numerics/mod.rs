//! Numerical substrate: tensors, reverse-mode gradients, RNG, order
//! statistics, PCA, and the finite-difference oracle used to verify every
//! trainable module in the crate.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod params;
pub mod pca;
pub mod real;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use gradcheck::{check_random_coords, finite_difference_gradient, max_rel_err};
pub use graph::{Graph, Mask, NodeId};
pub use params::ParameterStore;
pub use pca::principal_components;
pub use real::Real;
pub use rng::RngState;
pub use stats::quantile;
pub use tensor::Tensor;
