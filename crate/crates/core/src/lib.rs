//! Hypernetwork-conditioned image reconstruction.
//!
//! A single trained hypernetwork maps a loss-weight vector to the weights of
//! a small Unet, so reconstructions for any trade-off between loss terms can
//! be produced at inference time without retraining.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod forward;
pub mod losses;
pub mod networks;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{ComplexPair, NdArray, Tape, Var};
pub use scalar::Real;
