//! Robust flexible auto-weighted local-coordinate concept factorization (RFA-LCF).
//!
//! The crate is organised around the alternating optimisation:
//!
//! - [`model`]: domain types, auxiliary matrices and exact objective evaluation.
//! - [`updates`]: one step per variable (IRLS diagonals, bias, multiplicative
//!   updates for `W`, `V`, `Q`, and the linear solve for `P`).
//! - [`solver`]: initialisation, the alternating loop and its trace.
//! - [`baselines`]: plain NMF and concept factorization for comparisons.
//! - [`clustering`]: spherical K-means, accuracy, pairwise F-measure and the
//!   evaluation protocol.
//! - [`data`]: matrix files, synthetic blobs, corruption and normalisation.
//! - [`cli`]: the `rfalcf` command-line front end.
//!
//! Batch work (protocol cells, seeded restarts) runs on rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise;
//! see [`exec`].

pub mod baselines;
pub mod cli;
pub mod clustering;
pub mod data;
mod error;
pub mod exec;
pub mod model;
pub mod solver;
pub mod updates;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{DataMatrix, FactorState, Hyperparams, ObjectiveBreakdown};
pub use solver::{fit, FitResult, FitTrace};

