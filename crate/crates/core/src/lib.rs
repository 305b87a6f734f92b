//! Online continual test-time adaptation over a small, self-contained
//! neural-network core.
//!
//! The crate is `no_std` (it needs `alloc`) and carries no IO. It provides:
//!
//! * [`tensor`] and [`tape`]: dense `f32` tensors and a reverse-mode
//!   autodiff tape with the handful of ops small conv nets need.
//! * [`nn`]: the two fixed architectures, batch normalization, Adam,
//!   parameter snapshots and source pretraining.
//! * [`stream`]: procedurally generated glyph images, ten corruption
//!   families with five severity levels, and drifting target streams.
//! * [`adapt`]: the weight-averaged / augmentation-averaged teacher with
//!   stochastic restoration, plus the Source, BN-statistics, pseudo-label
//!   and entropy-minimization baselines.
//! * [`eval`]: online error bookkeeping and the evaluation loop.
//!
//! Everything is deterministic given its seeds; transcendental functions go
//! through `libm` so results do not depend on the platform's math library.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adapt;
pub mod error;
pub mod eval;
mod kernels;
pub mod math;
pub mod nn;
pub mod rng;
pub mod stream;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
