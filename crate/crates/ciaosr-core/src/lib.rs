//! Arbitrary-scale image super-resolution with a continuous implicit
//! attention head, built on a small self-contained tensor/autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense tensors, the autodiff tape, Adam;
//! * [`rng`] — seeded, splittable randomness;
//! * [`gradcheck`] — finite-difference verification of every op;
//! * [`coords`] — the continuous coordinate conventions shared by all heads;
//! * [`nn`] — parameter registry and layer definitions;
//! * [`encoder`] — the residual convolutional feature extractor;
//! * [`attention`] — the local rendering head and non-local feature block.

pub mod attention;
pub mod coords;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
