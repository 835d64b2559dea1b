//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value. A [`Graph`] records operations on
//! tensors and replays them backwards; trainable tensors live in a
//! [`ParamStore`] and enter a graph through [`Graph::param`].

mod graph;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
mod params;
mod real;
mod tensor;

pub use graph::{BatchNormOptions, CustomOp, Gradients, Graph, Var};
pub use params::{Param, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

/// Arithmetic precision of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[cfg(test)]
mod tests;
