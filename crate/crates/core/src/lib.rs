//! Early-exit object detection kit: a width-scalable SSD-style detector with
//! an empty-frame classification branch, its training loop, confidence
//! gating, int8 quantization, and cost accounting.

pub mod anchors;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod gate;
pub mod gradcheck;
pub mod hpo;
pub mod image;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
