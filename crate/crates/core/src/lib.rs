//! Self-distilled quantization for small transformer encoders.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod ipq;
pub mod losses;
pub mod model;
pub mod noise;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
