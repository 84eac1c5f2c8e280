//! Deterministic dense numerics: row-major matrices, vectors, seeded
//! randomness, singular values, finite differences.
//!
//! Everything here runs single-threaded with fixed reduction order, so a
//! given seed reproduces bit-identical results run to run.

mod fd;
mod matrix;
mod rng;
mod svd;

pub use fd::finite_diff_grad;
pub use matrix::{Matrix, Vector};
pub use rng::SeededRng;
pub use svd::{numeric_rank, svd_values};
