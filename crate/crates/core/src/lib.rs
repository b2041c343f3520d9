//! Single-shot panoptic segmentation on a small reverse-mode autograd core.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fpn;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod postprocess;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, Model32, Model64};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
