//! Spiking encoder-decoder image restoration trained by distilling decoder
//! features from an equivalent non-spiking network, with a firing-rate based
//! energy model for comparing the two.

pub mod autograd;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod distill;
pub mod energy;
pub mod error;
pub mod fft;
pub mod metrics;
pub mod model;
pub mod neuron;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
