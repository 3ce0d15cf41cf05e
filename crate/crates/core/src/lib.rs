//! Certified robustness through randomized smoothing.
//!
//! The crate covers the whole pipeline at desk scale: a small reverse-mode
//! autodiff engine, an MLP soft classifier, Monte Carlo certification,
//! smoothed PGD attacks, AdvMacer and baseline training, optimal-weight
//! ensembles, and an experiment harness with a CLI.

// NaN must fail these checks, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autodiff;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod model;
pub mod smoothing;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
