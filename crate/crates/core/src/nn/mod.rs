//! Minimal differentiable tensor engine used by the alignment module and the
//! restoration backbones.

pub mod checkpoint;
pub mod conv;
pub mod deform;
mod elem;
mod graph;
mod params;
mod tensor;

pub use conv::Padding;
pub use elem::Elem;
pub use graph::{Gradients, Graph, Var};
pub use params::{conv_weight, Params, Session};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
