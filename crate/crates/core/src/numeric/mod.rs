//! Dense tensors, a recorded operation graph with reverse-mode gradients,
//! finite-difference checking and the Adam optimizer.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Precision, Var};
pub use params::{BoundParams, ParamGrads, ParamStore};
pub use tensor::Tensor;
