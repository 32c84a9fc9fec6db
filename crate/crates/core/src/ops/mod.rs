//! Tensor kernels behind the differentiable operations in [`crate::graph`].

pub(crate) mod attention;
pub(crate) mod conv;
pub mod filter;
pub(crate) mod norm;
pub(crate) mod pool;
