//! Per-layer deltas `θ_f − θ_p` between a fine-tuned model and the anchor.
//!
//! Deltas are held in `f64`: the difference of two `f32` values is exact in
//! `f64`, so `apply(θ_p, compute(θ_f, θ_p), 1)` reproduces `θ_f` bit for bit.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, ParameterSet, SpecId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaLayer {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    spec_id: SpecId,
    source_task: String,
    layers: Vec<DeltaLayer>,
}

impl TaskVector {
    pub fn from_layers(spec_id: SpecId, source_task: impl Into<String>, layers: Vec<DeltaLayer>) -> Result<Self> {
        for layer in &layers {
            if layer.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: layer.name.clone(),
                });
            }
        }
        Ok(TaskVector {
            spec_id,
            source_task: source_task.into(),
            layers,
        })
    }

    /// All-zero vector shaped like `params`.
    pub fn zeros_like(params: &ParameterSet, source_task: impl Into<String>) -> Self {
        TaskVector {
            spec_id: params.spec_id(),
            source_task: source_task.into(),
            layers: params
                .layers()
                .iter()
                .map(|l| DeltaLayer {
                    name: l.name.clone(),
                    values: alloc::vec![0.0; l.values.len()],
                })
                .collect(),
        }
    }

    pub fn spec_id(&self) -> SpecId {
        self.spec_id
    }

    pub fn source_task(&self) -> &str {
        &self.source_task
    }

    pub fn layers(&self) -> &[DeltaLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DeltaLayer] {
        &mut self.layers
    }

    pub fn with_source_task(mut self, source_task: impl Into<String>) -> Self {
        self.source_task = source_task.into();
        self
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values of all layers in order, as one flat sequence.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.values.iter().copied())
    }

    pub fn dot(&self, other: &TaskVector) -> Result<f64> {
        ensure_congruent(self, other)?;
        Ok(self.flat().zip(other.flat()).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.flat().map(|v| v * v).sum())
    }

    /// Cosine similarity; 0 when either vector is all zeros.
    pub fn cosine(&self, other: &TaskVector) -> Result<f64> {
        let dot = self.dot(other)?;
        let denom = self.norm() * other.norm();
        Ok(if denom > 0.0 { dot / denom } else { 0.0 })
    }

    /// Matches another task vector's spec, layer names and lengths.
    pub fn is_congruent(&self, other: &TaskVector) -> bool {
        ensure_congruent(self, other).is_ok()
    }

    pub(crate) fn ensure_congruent_with(&self, params: &ParameterSet) -> Result<()> {
        if self.spec_id != params.spec_id() {
            return Err(Error::SpecMismatch);
        }
        if self.layers.len() != params.layers().len()
            || self
                .layers
                .iter()
                .zip(params.layers())
                .any(|(d, p)| d.name != p.name || d.values.len() != p.values.len())
        {
            return Err(Error::shape("task vector is not congruent with the parameter set"));
        }
        Ok(())
    }
}

pub(crate) fn ensure_congruent(a: &TaskVector, b: &TaskVector) -> Result<()> {
    if a.spec_id != b.spec_id {
        return Err(Error::SpecMismatch);
    }
    if a.layers.len() != b.layers.len()
        || a
            .layers
            .iter()
            .zip(&b.layers)
            .any(|(x, y)| x.name != y.name || x.values.len() != y.values.len())
    {
        return Err(Error::shape("task vectors have different layouts"));
    }
    Ok(())
}

pub fn compute_task_vector(fine_tuned: &ParameterSet, pretrained: &ParameterSet) -> Result<TaskVector> {
    compute_named(fine_tuned, pretrained, "")
}

/// [`compute_task_vector`] tagged with the task it came from.
pub fn compute_named(fine_tuned: &ParameterSet, pretrained: &ParameterSet, task: &str) -> Result<TaskVector> {
    if fine_tuned.spec_id() != pretrained.spec_id() {
        return Err(Error::SpecMismatch);
    }
    let layers = fine_tuned
        .layers()
        .iter()
        .zip(pretrained.layers())
        .map(|(f, p)| DeltaLayer {
            name: f.name.clone(),
            values: f
                .values
                .iter()
                .zip(&p.values)
                .map(|(&a, &b)| f64::from(a) - f64::from(b))
                .collect(),
        })
        .collect();
    Ok(TaskVector {
        spec_id: fine_tuned.spec_id(),
        source_task: task.into(),
        layers,
    })
}

/// `θ_p + scale · τ`, computed in `f64` and rounded once to `f32`.
pub fn apply(pretrained: &ParameterSet, delta: &TaskVector, scale: f64) -> Result<ParameterSet> {
    delta.ensure_congruent_with(pretrained)?;
    let layers = pretrained
        .layers()
        .iter()
        .zip(&delta.layers)
        .map(|(p, d)| {
            let values: Vec<f32> = p
                .values
                .iter()
                .zip(&d.values)
                .map(|(&base, &dv)| {
                    let step = scale * dv;
                    // keeps the sign of a -0.0 base when nothing is added
                    if step == 0.0 {
                        base
                    } else {
                        (f64::from(base) + step) as f32
                    }
                })
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: p.name.clone() });
            }
            Ok(Layer {
                name: p.name.clone(),
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParameterSet::from_parts_unchecked(pretrained.spec_id(), layers))
}

/// Distribution summary of one layer's deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: String,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Per-layer statistics in layer order. Quartiles interpolate linearly
/// between order statistics.
pub fn layer_stats(delta: &TaskVector) -> Result<Vec<LayerStats>> {
    if delta.layers.is_empty() {
        return Err(Error::Empty("task vector"));
    }
    delta
        .layers
        .iter()
        .map(|layer| {
            if layer.values.is_empty() {
                return Err(Error::Empty("task vector layer"));
            }
            let n = layer.values.len();
            let mean = layer.values.iter().sum::<f64>() / n as f64;
            let var = layer.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let mut sorted = layer.values.clone();
            sorted.sort_by(f64::total_cmp);
            Ok(LayerStats {
                layer: layer.name.clone(),
                count: n,
                mean,
                std: libm::sqrt(var),
                min: sorted[0],
                q1: quantile(&sorted, 0.25),
                median: quantile(&sorted, 0.5),
                q3: quantile(&sorted, 0.75),
                max: sorted[n - 1],
            })
        })
        .collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = libm::ceil(pos) as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
