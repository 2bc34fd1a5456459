//! Sparse variational Gaussian processes with orthogonally decoupled
//! inducing points.
//!
//! The crate provides the uncollapsed and collapsed bounds for SVGP and for
//! SOLVE-GP (a second set of inducing points placed in the orthogonal
//! complement of the first), a dense exact-GP oracle, a doubly stochastic
//! deep variant, and an Adam trainer with an operation counter.

pub mod data;
pub mod deepgp;
pub mod error;
pub mod exact;
mod graph;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod run;
pub mod solvegp;
pub mod svgp;
pub mod tape;
pub mod trainer;
pub mod variational;

pub use error::{GpError, Result};
pub use kernels::{KernelFamily, KernelSpec};
pub use variational::{CholeskyGaussian, GaussianLikelihood, Whitening};
