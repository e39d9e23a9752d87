//! Stochastic homogenization laboratory: random convex Lagrangians, cell
//! problems on triadic cubes, effective-model estimation, and the
//! multiscale diagnostics built on them.

pub mod cell;
pub mod effective;
pub mod error;
pub mod field;
pub mod geometry;
pub mod harness;
pub mod homogenize;
pub mod regularity;
pub mod solver;
pub mod tasks;

pub use error::{Error, Result};
