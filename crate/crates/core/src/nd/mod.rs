//! Minimal tensor algebra with reverse-mode automatic differentiation.

mod checkpoint;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use graph::{Activation, Gradients, Graph, Var};
pub use params::{BoundParams, ParamSet};
pub use tensor::{Real, Tensor};
