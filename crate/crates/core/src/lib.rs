//! Unified input, epistemic and aleatoric uncertainty for small ReLU networks.
//!
//! The crate is `no_std` (with `alloc`) and contains only the numerical core:
//!
//! - [`linalg`] and [`rng`]: dense row-major matrices, variance sandwiches, and
//!   counter-based seeded Gaussian streams.
//! - [`network`]: a ReLU MLP with dropout, dropconnect, mean-field Gaussian
//!   (flipout-style) and ensemble realizations, plus exact forward, backward and
//!   Jacobian passes.
//! - [`training`]: cross-entropy, Gaussian NLL, KL, Adam and training loops.
//! - [`uncertainty`]: Taylor and Monte Carlo propagation of input uncertainty
//!   composed with an epistemic estimator, and the classification/regression
//!   decompositions built on top of them.
//! - [`datasets`]: two moons and the `x sin x` toy regression generators.
//!
//! File formats, the CLI and rendering live in the `uniunc` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod datasets;
mod error;
pub mod linalg;
pub mod network;
pub mod rng;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use rng::RngStream;
