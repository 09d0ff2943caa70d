//! One-shot RF human activity recognition.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode gradients, layers, FFT, Adam.
//! - [`signal`]: multipath channel simulation for Wi-Fi CSI, FMCW and impulse radio.
//! - [`basenet`]: the dual-path spatial/temporal embedding network.
//! - [`meta`]: the trainable cosine-metric head, residual classifier and episodic training.
//! - [`baselines`]: fine-tuning, prototypical and frozen-metric comparisons.
//! - [`harness`]: file formats, configuration, cross-validation, reports and the self-test.

pub mod baselines;
pub mod basenet;
pub mod error;
pub mod harness;
pub mod meta;
pub mod numerics;
pub mod signal;

pub use error::{Error, Result};

#[cfg(test)]
mod properties;
