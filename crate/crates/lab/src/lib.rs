//! Files, experiment grids and the command-line driver around
//! [`tailspace_core`].
//!
//! * [`tspm`]: the `TSPM` binary matrix format.
//! * [`checkpoint`]: adapter and model checkpoints.
//! * [`artifacts`]: metric CSVs, effective-rank reports, covariance dumps.
//! * [`config`]: the JSON experiment configuration.
//! * [`experiment`]: the strategy × rank × seed grid and comparison tables.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
mod error;
pub mod experiment;
pub mod tspm;

pub use error::{LabError, Result};
pub use tailspace_core as core;
