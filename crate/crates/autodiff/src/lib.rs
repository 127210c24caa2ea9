//! Minimal reverse-mode automatic differentiation over dense `f32` arrays.
//!
//! Values live in a [`Graph`] tape; parameters live in a [`ParamStore`] and
//! enter a graph through [`Graph::param`]. Shapes are always explicit: the
//! only broadcasting is scalar-times-tensor ([`Graph::scale`]) and the
//! dedicated row-bias op ([`Graph::add_bias`]).

mod error;
mod gemm;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
