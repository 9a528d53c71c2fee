//! Post-training quantization toolkit for residual CNNs.

pub mod calibration;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod hexfloat;
pub mod kernels;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod profile;
pub mod quant;
pub mod report;
pub mod reservoir;
pub mod tensor;
pub mod tensor_io;
mod textfmt;

pub use error::{PtqError, Result};
