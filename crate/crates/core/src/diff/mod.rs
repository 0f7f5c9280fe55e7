//! Minimal reverse-mode differentiation engine in `f64`.
//!
//! [`Graph`] records one forward pass; [`Graph::backward`] returns
//! [`Gradients`]. Parameters live in a [`ParamStore`] and are registered into
//! each graph with [`Graph::param`]; [`adam_step`] applies AdamW updates and
//! the `checkpoint` functions persist a store.

mod adam;
pub mod audit;
mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, random_projection, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::Rulebook;
pub use params::{kaiming_uniform, normal, xavier_uniform, ParamId, ParamStore};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use graph::sigmoid;

#[cfg(test)]
mod tests;
