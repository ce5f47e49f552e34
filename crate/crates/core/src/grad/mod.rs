//! Reverse-mode differentiation over dense `f64` tensors and the ADAM update.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamState, DEFAULT_LR};
pub(crate) use adam::Moments;
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamEntry, ParamSet, Partition, Selector};
pub use tensor::Tensor;
