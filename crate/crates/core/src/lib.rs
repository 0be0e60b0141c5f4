//! Simulation and analysis of multicarrier Gaussian multiple access with
//! adaptive quadrature division: Gaussian sampling, unitary DFTs, sub-channel
//! banks, water-filling, capacities, input compensation and opportunistic
//! weighting.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod capacity;
pub mod channel;
pub mod compensation;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod input;
pub mod numfmt;
pub mod opportunistic;
pub mod quadrature;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use gaussian::{ComplexSample, GaussianSource, GaussianVector};
