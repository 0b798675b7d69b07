//! Nuclei instance segmentation with a vision-transformer encoder and
//! U-shaped multi-branch decoder.

mod codec;
pub mod cli;
pub mod cvtf;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod postproc;
pub mod sampling;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::TensorF32;
