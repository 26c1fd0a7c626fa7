//! Learned layer-wise merging.
//!
//! Each (model `i`, layer `j`) pair gets one trainable scalar `w(i,j)`. The
//! merged layer is
//!
//! ```text
//! θ_m(j) = θ_p(j) + Σᵢ g(w(i,j)) · τ(i,j)
//! ```
//!
//! with `g = tanh` (or the identity for the ablation). Only `W` is trained;
//! the anchor and the task vectors stay frozen. The gradient follows from
//! one backward pass through the merged model:
//!
//! ```text
//! ∂ℓ/∂w(i,j) = g'(w(i,j)) · ⟨∇_{θ_m(j)} ℓ, τ(i,j)⟩
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Example, TaskExamples};
use crate::error::{Error, Result};
use crate::model::{Layer, ModelSpec, ParameterSet};
use crate::nn::{self, LossValue};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::rng;
use crate::task_vector::{self, TaskVector};

/// `k × n` merge weights, row `i` for model `i`, column `j` for layer `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights {
    model_ids: Vec<String>,
    layer_names: Vec<String>,
    values: Vec<f64>,
}

impl MergeWeights {
    pub fn new(model_ids: Vec<String>, layer_names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != model_ids.len() * layer_names.len() {
            return Err(Error::shape(format!(
                "{} values cannot fill a {}×{} weight matrix",
                values.len(),
                model_ids.len(),
                layer_names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: "merge weights".into(),
            });
        }
        Ok(MergeWeights {
            model_ids,
            layer_names,
            values,
        })
    }

    pub fn filled(model_ids: Vec<String>, layer_names: Vec<String>, value: f64) -> Result<Self> {
        let len = model_ids.len() * layer_names.len();
        MergeWeights::new(model_ids, layer_names, alloc::vec![value; len])
    }

    /// One row per task vector, one column per layer, all `value`.
    pub fn for_task_vectors(task_vectors: &[TaskVector], value: f64) -> Result<Self> {
        let first = task_vectors.first().ok_or(Error::Empty("task vector list"))?;
        MergeWeights::filled(
            task_vectors.iter().map(|t| String::from(t.source_task())).collect(),
            first.layers().iter().map(|l| l.name.clone()).collect(),
            value,
        )
    }

    pub fn k(&self) -> usize {
        self.model_ids.len()
    }

    pub fn n(&self) -> usize {
        self.layer_names.len()
    }

    /// Number of trainable scalars, `k · n`.
    pub fn trainable_count(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, model: usize, layer: usize) -> f64 {
        self.values[model * self.n() + layer]
    }

    pub fn set(&mut self, model: usize, layer: usize, value: f64) {
        let n = self.n();
        self.values[model * n + layer] = value;
    }

    pub fn row(&self, model: usize) -> &[f64] {
        &self.values[model * self.n()..(model + 1) * self.n()]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn layer_names(&self) -> &[String] {
        &self.layer_names
    }

    /// Coefficients that actually scale the task vectors.
    pub fn effective(&self, use_tanh: bool) -> Vec<f64> {
        self.values.iter().map(|&w| gate(w, use_tanh)).collect()
    }
}

#[inline]
fn gate(w: f64, use_tanh: bool) -> f64 {
    if use_tanh {
        libm::tanh(w)
    } else {
        w
    }
}

#[inline]
fn gate_derivative(w: f64, use_tanh: bool) -> f64 {
    if use_tanh {
        let t = libm::tanh(w);
        1.0 - t * t
    } else {
        1.0
    }
}

/// How validation examples from different tasks are weighted in the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossBalance {
    /// Plain mean over the union of examples.
    #[default]
    UniformOverExamples,
    /// Each task contributes the same total weight.
    UniformOverTasks,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Starting value of every raw `w(i,j)`.
    pub init_value: f64,
    pub use_tanh: bool,
    pub seed: u64,
    pub balance: LossBalance,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig::adamw(1e-2),
            init_value: 0.0,
            use_tanh: true,
            seed: 0,
            balance: LossBalance::UniformOverExamples,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be at least 1"));
        }
        if !self.init_value.is_finite() {
            return Err(Error::arg("init_value must be finite"));
        }
        self.optimizer.validate()
    }
}

fn check_inputs(pretrained: &ParameterSet, task_vectors: &[TaskVector], weights: &MergeWeights) -> Result<()> {
    if task_vectors.is_empty() {
        return Err(Error::Empty("task vector list"));
    }
    if weights.k() != task_vectors.len() || weights.n() != pretrained.layers().len() {
        return Err(Error::shape(format!(
            "merge weights are {}×{} but there are {} task vectors over {} layers",
            weights.k(),
            weights.n(),
            task_vectors.len(),
            pretrained.layers().len()
        )));
    }
    for tv in task_vectors {
        tv.ensure_congruent_with(pretrained)?;
    }
    Ok(())
}

/// Merged layer values before rounding to `f32`.
fn merged_layers(
    pretrained: &ParameterSet,
    task_vectors: &[TaskVector],
    weights: &MergeWeights,
    use_tanh: bool,
) -> Result<Vec<Vec<f64>>> {
    check_inputs(pretrained, task_vectors, weights)?;
    let coeffs = weights.effective(use_tanh);
    let n = weights.n();
    pretrained
        .layers()
        .iter()
        .enumerate()
        .map(|(j, base)| {
            let mut acc = alloc::vec![0.0f64; base.values.len()];
            for (i, tv) in task_vectors.iter().enumerate() {
                let c = coeffs[i * n + j];
                for (a, &d) in acc.iter_mut().zip(&tv.layers()[j].values) {
                    *a += c * d;
                }
            }
            for (a, &p) in acc.iter_mut().zip(&base.values) {
                *a = if *a == 0.0 { f64::from(p) } else { *a + f64::from(p) };
            }
            if acc.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: base.name.clone(),
                });
            }
            Ok(acc)
        })
        .collect()
}

/// `θ_p(j) + Σᵢ g(w(i,j)) · τ(i,j)` for every layer.
pub fn materialize(
    pretrained: &ParameterSet,
    task_vectors: &[TaskVector],
    weights: &MergeWeights,
    use_tanh: bool,
) -> Result<ParameterSet> {
    let merged = merged_layers(pretrained, task_vectors, weights, use_tanh)?;
    let layers = pretrained
        .layers()
        .iter()
        .zip(merged)
        .map(|(base, values)| {
            let values: Vec<f32> = values.into_iter().map(|v| v as f32).collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: base.name.clone(),
                });
            }
            Ok(Layer {
                name: base.name.clone(),
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParameterSet::from_parts_unchecked(pretrained.spec_id(), layers))
}

/// Batch loss at the merged model and `∂loss/∂W`, row-major `k × n`.
///
/// The backward pass runs on the merged values before `f32` rounding.
pub fn grad_w(
    spec: &ModelSpec,
    pretrained: &ParameterSet,
    task_vectors: &[TaskVector],
    weights: &MergeWeights,
    batch: &Batch,
    use_tanh: bool,
) -> Result<(LossValue, Vec<f64>)> {
    pretrained.ensure_matches(spec)?;
    let merged = merged_layers(pretrained, task_vectors, weights, use_tanh)?;
    let views: Vec<&[f64]> = merged.iter().map(Vec::as_slice).collect();
    let (loss, grads) = nn::backward_layers(spec, &views, batch)?;
    let n = weights.n();
    let mut out = alloc::vec![0.0; weights.trainable_count()];
    for (i, tv) in task_vectors.iter().enumerate() {
        for (j, layer) in tv.layers().iter().enumerate() {
            let inner: f64 = grads.layers[j].iter().zip(&layer.values).map(|(g, d)| g * d).sum();
            out[i * n + j] = gate_derivative(weights.get(i, j), use_tanh) * inner;
        }
    }
    Ok((loss, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub weights: MergeWeights,
    pub merged: ParameterSet,
    /// Validation objective before training, then after each epoch.
    pub loss_trace: Vec<f64>,
}

/// The concatenated validation examples with their loss weights.
struct Union<'a> {
    examples: Vec<&'a Example>,
    weights: Option<Vec<f64>>,
}

impl<'a> Union<'a> {
    fn new(validation: &[TaskExamples<'a>], balance: LossBalance) -> Result<Self> {
        let examples: Vec<&Example> = validation.iter().flat_map(|t| t.examples.iter()).collect();
        if examples.is_empty() {
            return Err(Error::Empty("validation set"));
        }
        let weights = match balance {
            LossBalance::UniformOverExamples => None,
            LossBalance::UniformOverTasks => {
                let tasks = validation.iter().filter(|t| !t.examples.is_empty()).count() as f64;
                Some(
                    validation
                        .iter()
                        .flat_map(|t| {
                            let w = 1.0 / (tasks * t.examples.len() as f64);
                            core::iter::repeat_n(w, t.examples.len())
                        })
                        .collect(),
                )
            }
        };
        Ok(Union { examples, weights })
    }

    fn batch(&self, indices: &[usize], input_dim: usize) -> Result<Batch> {
        let batch = Batch::from_examples(indices.iter().map(|&i| self.examples[i]), input_dim)?;
        match &self.weights {
            Some(w) => batch.with_weights(indices.iter().map(|&i| w[i]).collect()),
            None => Ok(batch),
        }
    }

    /// The full weighted objective at `params`.
    fn objective(&self, spec: &ModelSpec, params: &ParameterSet) -> Result<f64> {
        const CHUNK: usize = 256;
        let all: Vec<usize> = (0..self.examples.len()).collect();
        let mut total = 0.0;
        for chunk in all.chunks(CHUNK) {
            let batch = self.batch(chunk, spec.input_dim())?;
            let mass = match &self.weights {
                Some(w) => chunk.iter().map(|&i| w[i]).sum::<f64>(),
                None => chunk.len() as f64 / self.examples.len() as f64,
            };
            total += nn::forward(spec, params, &batch)?.loss.mean_loss * mass;
        }
        Ok(total)
    }
}

/// Mini-batch descent on `W` over the union of `validation`.
///
/// The union is reshuffled every epoch with a stream keyed by
/// `(cfg.seed, epoch)`.
pub fn fit(
    spec: &ModelSpec,
    pretrained: &ParameterSet,
    task_vectors: &[TaskVector],
    validation: &[TaskExamples<'_>],
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    pretrained.ensure_matches(spec)?;
    let mut weights = MergeWeights::for_task_vectors(task_vectors, cfg.init_value)?;
    check_inputs(pretrained, task_vectors, &weights)?;
    let union = Union::new(validation, cfg.balance)?;

    let mut opt = OptimizerState::new(cfg.optimizer, [weights.trainable_count()])?;
    let mut loss_trace = Vec::with_capacity(cfg.epochs + 1);
    let start = materialize(pretrained, task_vectors, &weights, cfg.use_tanh)?;
    loss_trace.push(union.objective(spec, &start)?);

    let mut order: Vec<usize> = (0..union.examples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        let mut stream = rng::keyed_stream(cfg.seed, "fit-epoch", &[&(epoch as u64).to_le_bytes()]);
        order.shuffle(&mut stream);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = union.batch(chunk, spec.input_dim())?;
            let (_, grad) = grad_w(spec, pretrained, task_vectors, &weights, &batch, cfg.use_tanh)
                .map_err(|e| if e.is_numeric() { Error::Diverged { epoch } } else { e })?;
            opt.step(&mut [weights.values.as_mut_slice()], &[grad])?;
            if weights.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
        }
        let merged = materialize(pretrained, task_vectors, &weights, cfg.use_tanh)
            .map_err(|e| if e.is_numeric() { Error::Diverged { epoch } } else { e })?;
        let loss = union
            .objective(spec, &merged)
            .map_err(|e| if e.is_numeric() { Error::Diverged { epoch } } else { e })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        loss_trace.push(loss);
    }

    let merged = materialize(pretrained, task_vectors, &weights, cfg.use_tanh)?;
    Ok(FitOutcome {
        weights,
        merged,
        loss_trace,
    })
}

/// [`fit`] starting from fine-tuned models rather than task vectors.
pub fn fit_models(
    spec: &ModelSpec,
    pretrained: &ParameterSet,
    fine_tuned: &[(&str, &ParameterSet)],
    validation: &[TaskExamples<'_>],
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    let task_vectors = fine_tuned
        .iter()
        .map(|(name, params)| task_vector::compute_named(params, pretrained, name))
        .collect::<Result<Vec<_>>>()?;
    fit(spec, pretrained, &task_vectors, validation, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use alloc::string::ToString;
    use alloc::vec;

    fn setup(k: usize) -> (ModelSpec, ParameterSet, Vec<TaskVector>) {
        let spec = ModelSpec::mlp(3, &[4], 2, Activation::Tanh).unwrap();
        let p = ParameterSet::init(&spec, 0);
        let tvs = (0..k)
            .map(|i| {
                let f = ParameterSet::init(&spec, 10 + i as u64);
                task_vector::compute_named(&f, &p, &i.to_string()).unwrap()
            })
            .collect();
        (spec, p, tvs)
    }

    #[test]
    fn zero_weights_give_pretrained() {
        let (_, p, tvs) = setup(3);
        let w = MergeWeights::for_task_vectors(&tvs, 0.0).unwrap();
        assert!(materialize(&p, &tvs, &w, true).unwrap().bit_eq(&p));
        assert!(materialize(&p, &tvs, &w, false).unwrap().bit_eq(&p));
    }

    #[test]
    fn half_coefficient() {
        let (_, p, tvs) = setup(1);
        let w = MergeWeights::for_task_vectors(&tvs, libm::atanh(0.5)).unwrap();
        let merged = materialize(&p, &tvs, &w, true).unwrap();
        let expected = task_vector::apply(&p, &tvs[0], 0.5).unwrap();
        for (a, b) in merged.layer_values().flatten().zip(expected.layer_values().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn weight_shape_is_checked() {
        let (_, p, tvs) = setup(2);
        let w = MergeWeights::for_task_vectors(&tvs[..1], 0.0).unwrap();
        assert!(matches!(materialize(&p, &tvs, &w, true), Err(Error::Shape(_))));
        assert!(MergeWeights::new(vec!["a".into()], vec!["x".into()], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_task_vector_layer_has_zero_gradient() {
        let (spec, p, mut tvs) = setup(2);
        for v in &mut tvs[1].layers_mut()[2].values {
            *v = 0.0;
        }
        let w = MergeWeights::for_task_vectors(&tvs, 0.3).unwrap();
        let batch = Batch::new(vec![0.2, -0.4, 0.9, 1.0, 0.5, -0.5], vec![0, 1], 3).unwrap();
        let (_, g) = grad_w(&spec, &p, &tvs, &w, &batch, true).unwrap();
        assert_eq!(g[w.n() + 2], 0.0);
        assert!(g[2] != 0.0);
    }

    #[test]
    fn gradient_at_zero_is_raw_inner_product() {
        let (spec, p, tvs) = setup(2);
        let w = MergeWeights::for_task_vectors(&tvs, 0.0).unwrap();
        let batch = Batch::new(vec![0.2, -0.4, 0.9, 1.0, 0.5, -0.5], vec![0, 1], 3).unwrap();
        let (_, g_tanh) = grad_w(&spec, &p, &tvs, &w, &batch, true).unwrap();
        let (_, grads) = nn::backward(&spec, &p, &batch).unwrap();
        for (i, tv) in tvs.iter().enumerate() {
            for (j, layer) in tv.layers().iter().enumerate() {
                let raw: f64 = grads.layers[j].iter().zip(&layer.values).map(|(a, b)| a * b).sum();
                assert!((g_tanh[i * w.n() + j] - raw).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn trainable_count_is_k_times_n() {
        let w = MergeWeights::filled(
            (0..11).map(|i| i.to_string()).collect(),
            (0..192).map(|j| j.to_string()).collect(),
            0.0,
        )
        .unwrap();
        assert_eq!(w.trainable_count(), 2112);
    }

    #[test]
    fn task_balance_weights_sum_to_one() {
        let a: Vec<Example> = (0..3).map(|i| Example { id: i, x: vec![0.0; 3], y: 0 }).collect();
        let b: Vec<Example> = (3..4).map(|i| Example { id: i, x: vec![0.0; 3], y: 1 }).collect();
        let views = [
            TaskExamples { task: "a", examples: &a },
            TaskExamples { task: "b", examples: &b },
        ];
        let union = Union::new(&views, LossBalance::UniformOverTasks).unwrap();
        let w = union.weights.unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fit_rejects_bad_config() {
        let (spec, p, tvs) = setup(1);
        let ex = [Example { id: 0, x: vec![0.0; 3], y: 0 }];
        let val = [TaskExamples { task: "0", examples: &ex }];
        let cfg = FitConfig {
            epochs: 0,
            ..FitConfig::default()
        };
        assert!(fit(&spec, &p, &tvs, &val, &cfg).is_err());
        assert_eq!(
            fit(&spec, &p, &tvs, &[], &FitConfig::default()),
            Err(Error::Empty("validation set"))
        );
    }
}
