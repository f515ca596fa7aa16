//! Post-training quantization of sequential conv nets to low-bit integers.

pub mod activations;
pub mod error;
pub mod multiquant;
pub mod netmodel;
pub mod quantizer;
pub mod refine;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{dequantize, mse, project, quant_range, QuantScheme, QuantizedTensor, Tensor};
