//! Progressive deep joint source-channel coding of images over simulated
//! wireless channels.
//!
//! The crate trains convolutional autoencoders that map images directly to
//! complex channel symbols and back, in layers: a base layer gives a coarse
//! reconstruction and each refinement layer improves it. Three layered
//! strategies are provided (one encoder with per-layer decoders, sequential
//! residual pairs, and a single decoder fed masked symbol prefixes) next to a
//! single-layer baseline, all trained end to end through differentiable AWGN
//! and slow Rayleigh fading channel models.

pub mod channel;
pub mod codec;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod schemes;
pub mod training;

pub use error::{Error, Result};
