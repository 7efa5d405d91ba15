//! Stochastic impulse control with changing running costs.
//!
//! The crate simulates the impulse-driven state equation, solves the
//! parameterized quasi-variational inequality for the value function,
//! solves the first and second adjoint BSDEs by regression Monte Carlo and
//! checks the dynamic programming and maximum-principle conditions.

pub mod adjoint;
pub mod cli;
pub mod error;
pub mod maxprin;
pub mod model;
pub mod qvi;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
