//! Differentiable operations recorded on a [`Graph`](crate::graph::Graph).
//!
//! Spatial tensors inside the network are channels-last (`[B, H, W, C]`);
//! images at the public boundary are `[B, 3, H, W]`.

mod conv;
mod elementwise;
pub mod layout;
mod norm;
mod reduce;

pub use conv::conv_out_size;
#[cfg(test)]
pub(crate) use elementwise::softplus;
