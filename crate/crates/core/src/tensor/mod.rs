//! Dense tensors, raw kernels and a reverse-mode autodiff graph whose
//! gradients are themselves differentiable.

mod dense;
mod graph;
pub mod kernels;
mod scalar;
mod smooth;

pub use dense::Tensor;
pub use graph::{Graph, GraphNode, NodeId, Op};
pub use scalar::Scalar;
pub use smooth::{gaussian_kernel, smooth};
