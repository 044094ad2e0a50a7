//! Activation-space tail-eigenvector low-rank adaptation.
//!
//! This crate holds the numerical core: dense linear algebra, activation
//! covariance calibration, adapter initialization strategies, a toy
//! feed-forward model with analytic gradients, AdamW training and spectral
//! diagnostics. It is `no_std` (with `alloc`); file formats, configuration
//! and the command line live in the `tailspace` crate.
//!
//! The typical pipeline for one layer:
//!
//! 1. run the frozen model over a small calibration set and accumulate the
//!    covariance of the layer's output activations ([`calibration`]),
//! 2. eigendecompose it and keep the eigenvectors of the `r` smallest
//!    eigenvalues, `Q_tail` ([`linalg::sym_eigh`]),
//! 3. initialize `B = Q_tail`, `A = Q_tailᵀ W` and freeze
//!    `W - s·B·A` so the layer output is unchanged ([`adapter`]),
//! 4. train `A` and `B` ([`train`]) and compare effective ranks before and
//!    after ([`analysis`]).

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapter;
pub mod analysis;
pub mod calibration;
mod error;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod task;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Matrix;
