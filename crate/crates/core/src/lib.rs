//! Spectral and rank dynamics of randomly initialized deep networks.
//!
//! The crate simulates the batch-normalized residual chain
//! `H₊ = BN(H + γ W H)` and its unnormalized counterpart (a product of random
//! matrices), measures rank functionals along the way, and provides a small
//! MLP engine with a rank-maximizing pretraining loop.
//!
//! Module map:
//! - [`rank`]: hard rank, soft rank, the stable-rank style lower bound and the
//!   Frobenius drift polynomial.
//! - [`init`]: weight sampling and reproducible random streams.
//! - [`chain`]: BN chain in H-space and M-space, the vanilla product chain,
//!   ergodic statistics.
//! - [`network`]: MLP forward/backward, pretraining, SGD, gradient alignment.
//! - [`datasets`]: synthetic inputs and the IDX loader.
//! - [`experiments`]: named experiments, CSV output, summaries.

pub mod chain;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod init;
pub mod network;
pub mod rank;

pub use error::{Error, Result};

/// Dense real matrix used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
