#![no_std]
extern crate alloc;

pub mod adversary;
pub mod backbone;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod losses;
pub mod mean_teacher;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Grads, Graph, Var};
pub use image::ImageTensor;
pub use params::{BoundParams, ParamRole, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
