//! Conversion of convolutional networks into rate-coded spiking networks of
//! integrate-and-fire neurons.

pub mod analog;
pub mod analysis;
pub mod calibrator;
pub mod error;
pub mod fixtures;
pub mod ir;
pub mod parser;
pub mod pipeline;
pub mod snn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
