//! Minimal differentiable tensor engine: dense kernels, a reverse-mode tape,
//! Adam, and a finite-difference gradient checker.

pub mod adam;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use element::Element;
pub use error::{NumError, Result};
pub use gradcheck::{compare_gradients, grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Activation, Graph, Var};
pub use kernels::ConvGeom;
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;

/// Logistic function, numerically stable for large |x|.
pub fn sigmoid<T: Element>(x: T) -> T {
    graph::sigmoid(x)
}
