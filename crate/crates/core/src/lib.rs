//! Unpaired day-to-night translation of event-camera histograms with a
//! Schrödinger-bridge diffusion GAN.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod events;
pub mod fsutil;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod objectives;
pub mod sb_bridge;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
