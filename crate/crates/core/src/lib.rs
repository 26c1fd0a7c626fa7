//! Model merging from a shared pretrained anchor.
//!
//! This crate is `no_std` (it needs `alloc`) and holds the numerical side of
//! the toolkit:
//!
//! - [`nn`]: a small MLP engine with cross-entropy loss, exact gradients and
//!   a training loop ([`train`]).
//! - [`task_vector`]: per-layer deltas between a fine-tuned model and the
//!   pretrained one.
//! - [`merge`]: Task Arithmetic, DARE, TIES and the λ grid search.
//! - [`supermerge`]: learned per-(model, layer) merge weights gated by `tanh`.
//! - [`hierarchy`]: tree-structured merging with a bounded number of resident
//!   models.
//! - [`cost`]: analytic peak-memory and FLOPs model.
//!
//! File formats, the synthetic benchmark and the CLI live in the `mergeforge`
//! crate.

#![no_std]

extern crate alloc;

pub mod cost;
pub mod data;
mod error;
pub mod hierarchy;
pub mod merge;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod supermerge;
pub mod task_vector;
pub mod train;

pub use data::{Batch, DatasetSplit, Example, TaskExamples};
pub use error::{Error, Result};
pub use model::{Activation, LayerDescriptor, LayerKind, ModelSpec, ParameterSet, SpecId};
pub use nn::{Gradients, LossValue};
pub use supermerge::{FitConfig, MergeWeights};
pub use task_vector::TaskVector;
