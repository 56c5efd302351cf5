//! Constructive depth expansion for normalized residual networks.
//!
//! This crate holds the allocation-only numerical core: a small dense tensor
//! type with a reverse-mode tape, the normalized residual network family
//! `T_l(z) = N_l(z + h_l(z))`, jumpboard-block construction from activation
//! gradients, closed-form generalization bounds and improvement certificates,
//! the train/test alignment simulator, and the power-law scaling recursion.
//!
//! Everything here is `no_std`; file formats, the CLI and parallel executors
//! live in the `resexp` companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod math;

pub mod alignlab;
pub mod certify;
pub mod data;
pub mod error;
pub mod harness;
pub mod jumpboard;
pub mod linalg;
pub mod netmodel;
pub mod scalelab;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
