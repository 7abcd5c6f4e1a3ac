//! Simulation and verification tools for degenerate square-root diffusions
//! on the nonnegative orthant.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod geometry;
pub mod coeffs;
pub mod czdecomp;
pub mod grid;
pub mod report;
pub mod rng;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
