//! Change detection between image pairs by metric learning: a siamese
//! convolutional encoder, a fixed distance layer and contrastive-family
//! training, with a synthetic benchmark and evaluation tools.
//!
//! Everything numeric is generic over [`numerics::Scalar`] (`f32` or
//! `f64`); the aliases below fix the precision for common uses.

pub mod data;
pub mod encoder;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod metric;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, ErrorClass, Result};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
