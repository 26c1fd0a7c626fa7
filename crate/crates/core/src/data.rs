//! Examples, batches and per-task dataset splits.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One labelled input. `id` is unique within a task's splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub x: Vec<f32>,
    pub y: usize,
}

/// Row-major inputs, labels and optional per-example loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Vec<f32>,
    labels: Vec<usize>,
    weights: Option<Vec<f64>>,
    input_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f32>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if input_dim == 0 || inputs.len() != labels.len() * input_dim {
            return Err(Error::shape(format!(
                "{} inputs cannot form {} rows of width {input_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Batch {
            inputs,
            labels,
            weights: None,
            input_dim,
        })
    }

    pub fn from_examples<'a, I>(examples: I, input_dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for ex in examples {
            if ex.x.len() != input_dim {
                return Err(Error::shape(format!(
                    "example {} has {} features, expected {input_dim}",
                    ex.id,
                    ex.x.len()
                )));
            }
            inputs.extend_from_slice(&ex.x);
            labels.push(ex.y);
        }
        Batch::new(inputs, labels, input_dim)
    }

    /// Loss becomes `Σ wᵢ ℓᵢ / Σ wᵢ`. Weights must be positive and finite.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.labels.len() {
            return Err(Error::shape("one weight per example required"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::arg("example weights must be positive and finite"));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn row(&self, idx: usize) -> &[f32] {
        &self.inputs[idx * self.input_dim..(idx + 1) * self.input_dim]
    }
}

/// A task's examples borrowed under its name.
#[derive(Clone, Copy, Debug)]
pub struct TaskExamples<'a> {
    pub task: &'a str,
    pub examples: &'a [Example],
}

/// Train/validation/test sets for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub task_name: String,
    pub input_dim: usize,
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

impl DatasetSplit {
    pub fn new(
        task_name: impl Into<String>,
        input_dim: usize,
        num_classes: usize,
        train: Vec<Example>,
        validation: Vec<Example>,
        test: Vec<Example>,
    ) -> Result<Self> {
        let split = DatasetSplit {
            task_name: task_name.into(),
            input_dim,
            num_classes,
            train,
            validation,
            test,
        };
        split.validate()?;
        Ok(split)
    }

    /// Builds a split whose source has no validation set by carving
    /// `fraction` of `train` off with [`split_validation`].
    pub fn with_carved_validation(
        task_name: impl Into<String>,
        input_dim: usize,
        num_classes: usize,
        train: Vec<Example>,
        test: Vec<Example>,
        fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let task_name = task_name.into();
        let (train, validation) = split_validation(train, fraction, seed, &task_name)?;
        DatasetSplit::new(task_name, input_dim, num_classes, train, validation, test)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (split, examples) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            for ex in examples {
                if ex.x.len() != self.input_dim {
                    return Err(Error::shape(format!(
                        "{}/{split}: example {} has {} features, expected {}",
                        self.task_name,
                        ex.id,
                        ex.x.len(),
                        self.input_dim
                    )));
                }
                if ex.y >= self.num_classes {
                    return Err(Error::arg(format!(
                        "{}/{split}: label {} out of range for {} classes",
                        self.task_name, ex.y, self.num_classes
                    )));
                }
                if !seen.insert(ex.id) {
                    return Err(Error::arg(format!(
                        "{}: example id {} appears more than once",
                        self.task_name, ex.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn validation_view(&self) -> TaskExamples<'_> {
        TaskExamples {
            task: &self.task_name,
            examples: &self.validation,
        }
    }

    pub fn test_view(&self) -> TaskExamples<'_> {
        TaskExamples {
            task: &self.task_name,
            examples: &self.test,
        }
    }
}

/// Moves `round(fraction · n)` shuffled examples into a validation set.
///
/// The shuffle stream is keyed by `(seed, task_name)`. The validation size is
/// clamped to `1..=n-1` so both sides stay non-empty.
pub fn split_validation(
    examples: Vec<Example>,
    fraction: f64,
    seed: u64,
    task_name: &str,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = examples.len();
    if n < 2 {
        return Err(Error::arg("at least 2 examples are required to carve a validation set"));
    }
    let n_val = (libm::round(fraction * n as f64) as usize).clamp(1, n - 1);

    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = rng::keyed_stream(seed, "split-validation", &[task_name.as_bytes()]);
    order.shuffle(&mut stream);
    let mut is_val = alloc::vec![false; n];
    for &idx in &order[..n_val] {
        is_val[idx] = true;
    }

    let mut train = Vec::with_capacity(n - n_val);
    let mut validation = Vec::with_capacity(n_val);
    for (ex, val) in examples.into_iter().zip(is_val) {
        if val {
            validation.push(ex);
        } else {
            train.push(ex);
        }
    }
    Ok((train, validation))
}
