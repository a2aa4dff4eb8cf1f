//! Weakly-supervised solar power plant classification and pixel detection on
//! 7-band 16×16 multi-spectral patches.
//!
//! * [`nn`]: layer kernels with hand-written backward passes, SGD and a
//!   finite-difference gradient checker.
//! * [`models`]: I-Net and FB-Net (feedback paths with shared weights) in
//!   their GAP / no-GAP variants, plus checkpoints.
//! * [`maps`]: feature averaging, CAM, Grad-CAM, resizing and normalization.
//! * [`mpcnn`]: multi-channel pulse-coupled neural network fusion.
//! * [`training`], [`evaluation`], [`data`]: the experiment pipeline.
//! * [`cli`]: the `fbnet` command-line front end.

pub mod cli;
pub mod detection;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod maps;
pub mod models;
pub mod mpcnn;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
