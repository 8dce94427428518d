//! Passivity-based control of a discretized frictional fault.
//!
//! The plant is a set of spring-coupled sliders with slip-weakening Coulomb
//! friction. Fluid injection lowers the effective normal stress through a
//! slow diffusion actuator, and a high-gain observer rebuilds the state from
//! the average slip-rate.

// Validation uses `!(x > 0.0)` style checks so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod control;
pub mod error;
pub mod model;
pub mod observer;
pub mod passivity;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
