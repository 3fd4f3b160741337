//! Federated poisoning laboratory core.
//!
//! Everything needed to simulate federated image classification under
//! targeted poisoning: a small neural-network engine, the federation loop,
//! the conditional-GAN poison sample generator, baseline attacks, robust
//! aggregation defenses and the evaluation metrics. The crate is `no_std`
//! with `alloc`; the `std` feature only switches error/RNG plumbing to the
//! standard library and `parallel` trains the clients of a round on rayon.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod attacks;
pub mod classifier;
pub mod data;
pub mod defenses;
pub mod error;
pub mod fl;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod psg;
pub mod rng;

pub use error::{Error, Result};
pub use params::ParamVector;
