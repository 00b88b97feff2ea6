//! Redundancy-reduction self-supervised learning with a partial information
//! decomposition (PID) toolkit.
//!
//! The crate is organised bottom-up:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`linalg`] | standardization, cross-correlation, covariance, Cholesky whitening |
//! | [`pid`] | Williams–Beer decomposition of I(T; S1, S2) into redundancy, unique and synergy |
//! | [`losses`] | Barlow-Twins loss with zero / Gaussian / running-average off-diagonal targets, W-MSE and its variants, analytic gradients |
//! | [`network`] | MLP encoder + projector with manual backprop and Adam |
//! | [`augment`] | datasets and the standard / heavy two-view augmentation pipelines |
//! | [`protocol`] | two-phase pre-training (redundancy reduction, then synergy addition) and checkpoints |
//! | [`eval`] | linear probe and the PID diagnostic of trained encoders |
//! | [`cli`] | the `pidssl` command-line front end |
//!
//! All randomness is derived from explicit seeds through [`rng`], so every run
//! is bit-reproducible.

// `!(x >= 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod cli;
mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod network;
pub mod pid;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
