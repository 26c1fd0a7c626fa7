//! Mini-batch training of a full [`ParameterSet`].

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, DatasetSplit, Example};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParameterSet};
use crate::nn;
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub params: ParameterSet,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train(spec: &ModelSpec, init: &ParameterSet, data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainReport> {
    train_on(spec, init, &data.train, cfg)
}

/// Shuffles `examples` every epoch with a stream keyed by `(seed, epoch)`.
pub fn train_on(
    spec: &ModelSpec,
    init: &ParameterSet,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.epochs == 0 {
        return Err(Error::arg("epochs must be at least 1"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::arg("batch_size must be at least 1"));
    }
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    init.ensure_matches(spec)?;

    let mut params = init.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, spec.layers().iter().map(|l| l.param_count()))?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        let mut stream = rng::keyed_stream(cfg.seed, "train-epoch", &[&(epoch as u64).to_le_bytes()]);
        order.shuffle(&mut stream);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_examples(chunk.iter().map(|&i| &examples[i]), spec.input_dim())?;
            let (loss, grads) = match nn::backward(spec, &params, &batch) {
                Ok(out) => out,
                Err(e) if e.is_numeric() => return Err(Error::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            if !loss.mean_loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss.mean_loss * chunk.len() as f64;
            let mut views: Vec<&mut [f32]> = params
                .layers_mut()
                .iter_mut()
                .map(|l| l.values.as_mut_slice())
                .collect();
            opt.step(&mut views, &grads.layers)?;
        }
        let epoch_loss = loss_sum / examples.len() as f64;
        if !epoch_loss.is_finite() || params.layer_values().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainReport { params, epoch_losses })
}
