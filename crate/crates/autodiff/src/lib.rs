//! A compact reverse-mode automatic differentiation engine over dense `f64`
//! tensors. Gradients are themselves graph tensors when requested, which is
//! what allows losses defined on gradient-derived quantities (such as
//! Grad-CAM saliency maps) to be optimized.

mod grad;
pub mod sparse;
mod tensor;

pub use grad::{backward, finite_difference, grad, max_relative_error};
pub use sparse::SparseMap;
pub use tensor::{is_grad_enabled, no_grad, NoGradGuard, Tensor};
