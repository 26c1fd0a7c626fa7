//! Files, the synthetic benchmark and the command line around
//! [`mergeforge_core`].
//!
//! - [`checkpoint`]: binary checkpoints for parameters, task vectors and
//!   merge weights.
//! - [`dataset_io`]: JSON-lines datasets.
//! - [`store`]: a directory-backed model store for hierarchical merging.
//! - [`suite`]: synthetic task suites.
//! - [`bench`] and [`export`]: the benchmark and its report files.
//! - [`config`]: the JSON experiment configuration.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
mod error;
pub mod export;
pub mod store;
pub mod suite;

pub use config::{Config, Method};
pub use error::{Error, Result};
