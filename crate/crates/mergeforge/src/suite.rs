//! Synthetic classification suites over a shared input space.
//!
//! Every task draws from the same set of Gaussian prototypes, seen through
//! a task-specific rotation and offset, and maps the prototypes to classes
//! with its own label assignment. The pretraining mixture samples all task
//! geometries but labels every prototype with a fixed base assignment, so
//! the pretrained model has useful features and the wrong labels.

use mergeforge_core::rng::keyed_stream;
use mergeforge_core::{DatasetSplit, Example};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub in_domain: usize,
    pub out_of_domain: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Mixture components per task; each class owns at least one.
    pub components: usize,
    /// Components whose label a task moves away from the base assignment.
    /// `None` draws a fresh assignment for every task.
    pub relabeled: Option<usize>,
    /// Standard deviation of the prototypes around the origin.
    pub prototype_scale: f64,
    /// Standard deviation of each task's offset.
    pub task_offset: f64,
    /// Within-component noise.
    pub cluster_std: f64,
    pub train_per_task: usize,
    pub validation_per_task: usize,
    pub test_per_task: usize,
    /// Pretraining examples drawn from each task's geometry.
    pub pretrain_per_task: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            in_domain: 6,
            out_of_domain: 3,
            input_dim: 16,
            num_classes: 4,
            components: 8,
            relabeled: Some(2),
            prototype_scale: 1.0,
            task_offset: 4.0,
            cluster_std: 0.6,
            train_per_task: 600,
            validation_per_task: 32,
            test_per_task: 400,
            pretrain_per_task: 400,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_domain < 2 {
            return Err(Error::config("suite.in_domain must be at least 2"));
        }
        let counts = [
            ("input_dim", self.input_dim),
            ("train_per_task", self.train_per_task),
            ("validation_per_task", self.validation_per_task),
            ("test_per_task", self.test_per_task),
            ("pretrain_per_task", self.pretrain_per_task),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::config(format!("suite.{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("suite.num_classes must be at least 2"));
        }
        if self.relabeled.is_some_and(|r| r > self.components) {
            return Err(Error::config("suite.relabeled exceeds the mixture components"));
        }
        if self.num_classes > self.components {
            return Err(Error::config(format!(
                "suite.num_classes ({}) exceeds the mixture components ({})",
                self.num_classes, self.components
            )));
        }
        let reals = [
            ("prototype_scale", self.prototype_scale),
            ("task_offset", self.task_offset),
            ("cluster_std", self.cluster_std),
        ];
        for (name, value) in reals {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::config(format!("suite.{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub pretrain_mixture: DatasetSplit,
    pub in_domain_tasks: Vec<DatasetSplit>,
    pub out_of_domain_tasks: Vec<DatasetSplit>,
    pub generator_seed: u64,
}

impl TaskSuite {
    pub fn in_domain_names(&self) -> Vec<String> {
        self.in_domain_tasks.iter().map(|t| t.task_name.clone()).collect()
    }

    /// In-domain tasks followed by out-of-domain tasks.
    pub fn all_tasks(&self) -> impl Iterator<Item = &DatasetSplit> {
        self.in_domain_tasks.iter().chain(&self.out_of_domain_tasks)
    }
}

/// One task's view of the shared prototypes.
struct Geometry {
    rotation: Vec<f64>,
    offset: Vec<f64>,
    labels: Vec<usize>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Orthonormal rows from Gram-Schmidt on a Gaussian matrix.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.concat()
}

/// Each class gets `components / classes` prototypes (the first
/// `components % classes` classes one more), in shuffled order.
fn label_assignment(rng: &mut ChaCha8Rng, components: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..components).map(|m| m % classes).collect();
    labels.shuffle(rng);
    labels
}

/// The base assignment with `count` components moved to another class.
fn relabel(rng: &mut ChaCha8Rng, base: &[usize], classes: usize, count: usize) -> Vec<usize> {
    let mut labels = base.to_vec();
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.shuffle(rng);
    for &m in &order[..count] {
        let shift = rng.random_range(1..classes);
        labels[m] = (base[m] + shift) % classes;
    }
    labels
}

fn base_labels(cfg: &SuiteConfig) -> Vec<usize> {
    (0..cfg.components).map(|m| m % cfg.num_classes).collect()
}

fn geometry(cfg: &SuiteConfig, seed: u64, task: &str) -> Geometry {
    let mut rng = keyed_stream(seed, "suite-task", &[task.as_bytes()]);
    let d = cfg.input_dim;
    let rotation = random_rotation(&mut rng, d);
    let offset = (0..d).map(|_| cfg.task_offset * normal(&mut rng)).collect();
    let labels = match cfg.relabeled {
        Some(count) => relabel(&mut rng, &base_labels(cfg), cfg.num_classes, count),
        None => label_assignment(&mut rng, cfg.components, cfg.num_classes),
    };
    Geometry {
        rotation,
        offset,
        labels,
    }
}

fn prototypes(cfg: &SuiteConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = keyed_stream(seed, "suite-prototypes", &[]);
    (0..cfg.components)
        .map(|_| (0..cfg.input_dim).map(|_| cfg.prototype_scale * normal(&mut rng)).collect())
        .collect()
}

/// Draws `n` examples; `base_labels` replaces the task's own label map.
fn sample(
    cfg: &SuiteConfig,
    protos: &[Vec<f64>],
    geo: &Geometry,
    base_labels: Option<&[usize]>,
    rng: &mut ChaCha8Rng,
    n: usize,
    first_id: u64,
) -> Vec<Example> {
    let d = cfg.input_dim;
    (0..n)
        .map(|i| {
            let m = rng.random_range(0..protos.len());
            let point: Vec<f64> = protos[m].iter().map(|&p| p + cfg.cluster_std * normal(rng)).collect();
            let x = (0..d)
                .map(|r| {
                    let row = &geo.rotation[r * d..(r + 1) * d];
                    let v: f64 = row.iter().zip(&point).map(|(a, b)| a * b).sum();
                    (v + geo.offset[r]) as f32
                })
                .collect();
            let labels = base_labels.unwrap_or(&geo.labels);
            Example {
                id: first_id + i as u64,
                x,
                y: labels[m],
            }
        })
        .collect()
}

fn task_split(cfg: &SuiteConfig, seed: u64, protos: &[Vec<f64>], name: &str) -> Result<DatasetSplit> {
    let geo = geometry(cfg, seed, name);
    let mut rng = keyed_stream(seed, "suite-samples", &[name.as_bytes()]);
    let n_train = cfg.train_per_task;
    let n_val = cfg.validation_per_task;
    let train = sample(cfg, protos, &geo, None, &mut rng, n_train, 0);
    let validation = sample(cfg, protos, &geo, None, &mut rng, n_val, n_train as u64);
    let test = sample(cfg, protos, &geo, None, &mut rng, cfg.test_per_task, (n_train + n_val) as u64);
    Ok(DatasetSplit::new(name, cfg.input_dim, cfg.num_classes, train, validation, test)?)
}

pub fn in_domain_name(i: usize) -> String {
    format!("task{i}")
}

pub fn out_of_domain_name(i: usize) -> String {
    format!("heldout{i}")
}

/// Builds the suite. Every task is keyed by its name, so changing the
/// number of tasks leaves the existing ones unchanged.
pub fn generate_suite(cfg: &SuiteConfig, seed: u64) -> Result<TaskSuite> {
    cfg.validate()?;
    let protos = prototypes(cfg, seed);
    let in_names: Vec<String> = (0..cfg.in_domain).map(in_domain_name).collect();
    let out_names: Vec<String> = (0..cfg.out_of_domain).map(out_of_domain_name).collect();

    let in_domain_tasks = in_names
        .iter()
        .map(|n| task_split(cfg, seed, &protos, n))
        .collect::<Result<Vec<_>>>()?;
    let out_of_domain_tasks = out_names
        .iter()
        .map(|n| task_split(cfg, seed, &protos, n))
        .collect::<Result<Vec<_>>>()?;

    let base_labels = base_labels(cfg);
    let mut pretrain = Vec::new();
    for name in in_names.iter().chain(&out_names) {
        let geo = geometry(cfg, seed, name);
        let mut rng = keyed_stream(seed, "suite-pretrain", &[name.as_bytes()]);
        let first = pretrain.len() as u64;
        pretrain.extend(sample(cfg, &protos, &geo, Some(&base_labels), &mut rng, cfg.pretrain_per_task, first));
    }
    let pretrain_mixture = DatasetSplit::with_carved_validation(
        "pretrain",
        cfg.input_dim,
        cfg.num_classes,
        pretrain,
        Vec::new(),
        0.1,
        seed,
    )?;

    Ok(TaskSuite {
        pretrain_mixture,
        in_domain_tasks,
        out_of_domain_tasks,
        generator_seed: seed,
    })
}
