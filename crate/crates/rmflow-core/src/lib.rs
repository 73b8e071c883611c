//! Core library for one-step generative flow modeling with a noise-injection
//! refinement stage.
//!
//! Everything in this crate is pure computation over `f64` tensors: a small
//! dense tensor type with a counter-based RNG, a joint reverse/forward-mode
//! autodiff tape, residual-MLP velocity networks, interpolant paths and time
//! samplers, the training objectives, an Adam/EMA training loop, one- and
//! multi-step samplers, synthetic data generators, and histogram-based
//! distribution metrics. File formats, the CLI, and anything touching the
//! filesystem live in the companion `rmflow-lab` crate.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature only widens error reporting and is what the companion crate uses.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod eval;
pub mod flow;
pub mod losses;
mod mathx;
pub mod nets;
pub mod rng;
pub mod sample;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use rng::Rng;
pub use tensor::Tensor;
