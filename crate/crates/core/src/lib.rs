//! Speech enhancement with test-time training.
//!
//! The toolkit trains a Y-shaped mask-predicting network on a main denoising
//! task jointly with a self-supervised auxiliary task (masked spectrogram
//! prediction or noisy-target denoising), then adapts the shared encoder and
//! auxiliary branch per test sample before each prediction. Everything runs
//! on a small define-by-run reverse-mode differentiation engine in `f64`.
//!
//! Module map:
//! - [`autodiff`]: tensors, the operation graph, AdamW and the plateau scheduler
//! - [`dsp`]: STFT analysis/synthesis, WAV I/O, SNR mixing
//! - [`model`]: the Y-shaped network and its parameter registry
//! - [`tasks`]: self-supervised sample constructors and all loss terms
//! - [`train`]: the joint training loop and checkpoint persistence
//! - [`ttt`]: the four test-time-training strategies
//! - [`data`]: synthetic voice/noise generation and dataset construction
//! - [`metrics`]: SI-SDR, segmental SNR, log-spectral distance, result tables

pub mod autodiff;
pub mod data;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tasks;
pub mod train;
pub mod ttt;

pub use error::{Error, Result};
