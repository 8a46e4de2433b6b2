//! Optimal power management for battery energy storage systems built from
//! many heterogeneous cells.
//!
//! A small weight vector `θ` on the probability simplex blends three
//! normalized cell features (state of charge, temperature, internal
//! resistance) into per-cell power shares. `θ` is estimated online by
//! ensemble Kalman inversion over a short horizon, and a fast PI loop keeps
//! the bus balanced between solves.

// Negated comparisons reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod cell;
pub mod control;
pub mod enki;
pub mod error;
pub mod policy;
pub mod problem;
pub mod sim;

pub use error::{Error, Result};
