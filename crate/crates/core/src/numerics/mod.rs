//! Minimal tensor engine with reverse-mode differentiation.

mod checkpoint;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{read_checkpoint_into, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{normal_cdf, normal_pdf, Gradients, Graph, ParamGrads, Var};
pub use optim::Adam;
pub use params::{AdamState, ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
