//! Simultaneous state exchange between two sets of cavities through one
//! coupler qubit, and simultaneous EPR-pair generation.
//!
//! Module map: [`hilbert`] (truncated Fock spaces, operators, states),
//! [`model`] (Hamiltonians and parameters), [`analytic`] (closed-form
//! swap maps and ideal targets), [`dynamics`] (Schrödinger and Lindblad
//! evolution), [`metrics`] (fidelity and diagnostics), [`harness`]
//! (scenarios, sweeps, configuration and output).

pub mod analytic;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod hilbert;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
