//! Minimal reverse-mode tensor engine.
//!
//! A [`Graph`] records one forward pass over dense row-major [`Tensor`]s; a
//! backward sweep returns [`Gradients`] which can be folded into a
//! [`ParamStore`]. Operations are coarse (matmul, convolutions, fused
//! attention, layer norm) so that the graph stays small at desk-scale sizes.

pub mod checkpoint;
mod error;
pub mod fdcheck;
mod graph;
pub mod kernels;
mod params;
mod scalar;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use fdcheck::{fd_check, fd_check_params, relative_error, ParamCheck};
pub use graph::{FilterCombine, Gradients, Graph, OpProfile, Var};
pub use params::{DiffTensor, Init, ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::{strides, Tensor};
