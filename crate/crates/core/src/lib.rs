//! Numerical laboratory for inverse boundary problems of semilinear parabolic
//! equations: forward solvers, Dirichlet-to-Neumann measurements, CGO
//! solutions, higher-order linearization and reconstructions.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod cgo;
pub mod dnmap;
pub mod error;
pub mod expr;
pub mod forward;
pub mod grid;
pub mod linalg;
pub mod linearize;
pub mod model;
pub mod recon;

pub use error::{Error, Result};
