//! Small convolutional networks whose intermediate feature maps are
//! quantized, split into GF(2) bit-planes and compressed by learned
//! projection layers, together with fusion-aware memory accounting.

pub mod error;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gf2;
pub mod memplan;
pub mod nn;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
