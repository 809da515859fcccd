//! Small reverse-mode autodiff engine used by the toy diffusion backbone,
//! the compass encoder and the orientation regressor.

pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{write_atomic, ParamError, ParamStore};
pub use tensor::Tensor;
