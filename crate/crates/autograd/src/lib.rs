//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Gradients can be recorded (`create_graph`) and differentiated again, which
//! is what attribution-map penalties need: the map is a gradient, and the
//! penalty on it must be trained through.

mod graph;
pub mod tensor;

pub use graph::{Graph, Var};
pub use tensor::{ConvGeometry, Tensor};
