//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod finite_diff;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use finite_diff::finite_diff_jacobian;
pub use graph::{Gradients, Graph, NodeId, ParamGrads};
pub use kernels::ConvGeom;
pub use params::{ParamStore, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use tensor::Tensor;


