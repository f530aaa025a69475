//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with its
//! value; [`Graph::backward`] then walks the record in reverse. Batched
//! sequence data uses the layout `[channels, steps, batch]` so that the
//! convolution and attention kernels run over long contiguous rows.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use graph::{Elementwise, Graph, NodeId};

#[cfg(test)]
mod tests;
