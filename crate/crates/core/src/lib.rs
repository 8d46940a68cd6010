//! Spectral-shell dynamics of gradient flow.
//!
//! The microscopic side ([`netlab`], [`operator`], [`modes`], [`shells`])
//! follows the training error through the drifting eigenbasis of the Jacobian
//! Gram operator and checks the exact mode ODE and shell energy balance. The
//! macroscopic side ([`transport`]) evolves an energy density in log-spectral
//! coordinates and extracts tails, frontiers and scaling exponents.
//! [`experiments`] wires both into reproducible, config-driven runs.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod modes;
pub mod netlab;
pub mod operator;
pub mod shells;
pub mod stats;
pub mod transport;

pub use error::{Error, Result};
