//! Forward and backward passes for [`ModelSpec`] networks.
//!
//! Parameters are stored as `f32`; every activation, reduction and gradient
//! is carried in `f64`. The loss is softmax cross-entropy averaged over the
//! batch (or weighted by [`Batch::with_weights`]).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Batch, Example};
use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelSpec, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub mean_loss: f64,
    pub correct_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub loss: LossValue,
    /// Row-major `batch × num_classes`.
    pub logits: Vec<f64>,
}

/// `∂loss/∂θ`, one array per spec layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(spec: &ModelSpec) -> Self {
        Gradients {
            layers: spec.layers().iter().map(|l| vec![0.0; l.param_count()]).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .fold(0.0f64, |acc, g| acc.max(g.abs()))
    }
}

pub fn forward(spec: &ModelSpec, params: &ParameterSet, batch: &Batch) -> Result<ForwardOutput> {
    params.ensure_matches(spec)?;
    let layers: Vec<&[f32]> = params.layer_values().collect();
    forward_layers(spec, &layers, batch)
}

pub fn backward(spec: &ModelSpec, params: &ParameterSet, batch: &Batch) -> Result<(LossValue, Gradients)> {
    params.ensure_matches(spec)?;
    let layers: Vec<&[f32]> = params.layer_values().collect();
    backward_layers(spec, &layers, batch)
}

/// [`forward`] over raw per-layer slices of any real type.
pub fn forward_layers<T>(spec: &ModelSpec, layers: &[&[T]], batch: &Batch) -> Result<ForwardOutput>
where
    T: Copy + Into<f64>,
{
    check_inputs(spec, layers, batch)?;
    let acts = activations(spec, layers, batch)?;
    let logits = acts.last().expect("at least one layer");
    let (loss, _) = cross_entropy(logits, batch, spec.num_classes(), false);
    Ok(ForwardOutput {
        loss,
        logits: logits.clone(),
    })
}

pub fn backward_layers<T>(spec: &ModelSpec, layers: &[&[T]], batch: &Batch) -> Result<(LossValue, Gradients)>
where
    T: Copy + Into<f64>,
{
    check_inputs(spec, layers, batch)?;
    let acts = activations(spec, layers, batch)?;
    let rows = batch.len();
    let (loss, mut upstream) = cross_entropy(acts.last().unwrap(), batch, spec.num_classes(), true);

    let mut grads = Gradients::zeros_like(spec);
    for (idx, desc) in spec.layers().iter().enumerate().rev() {
        let out = &acts[idx + 1];
        let input = &acts[idx];
        for (g, &o) in upstream.iter_mut().zip(out) {
            *g *= desc.activation.derivative_from_output(o);
        }
        match desc.kind {
            LayerKind::Bias => {
                let grad = &mut grads.layers[idx];
                for row in upstream.chunks_exact(desc.output_dim) {
                    for (acc, g) in grad.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
            }
            LayerKind::Dense => {
                let (n_in, n_out) = (desc.input_dim, desc.output_dim);
                let weights = layers[idx];
                let grad = &mut grads.layers[idx];
                let mut downstream = vec![0.0; rows * n_in];
                for b in 0..rows {
                    let g_row = &upstream[b * n_out..(b + 1) * n_out];
                    let x_row = &input[b * n_in..(b + 1) * n_in];
                    let d_row = &mut downstream[b * n_in..(b + 1) * n_in];
                    for (o, &g) in g_row.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let w_row = &weights[o * n_in..(o + 1) * n_in];
                        let gw_row = &mut grad[o * n_in..(o + 1) * n_in];
                        for i in 0..n_in {
                            gw_row[i] += g * x_row[i];
                            d_row[i] += g * w_row[i].into();
                        }
                    }
                }
                upstream = downstream;
            }
        }
    }
    Ok((loss, grads))
}

/// Loss and accuracy over a whole example set, evaluated in chunks.
pub fn evaluate(spec: &ModelSpec, params: &ParameterSet, examples: &[Example]) -> Result<LossValue> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    const CHUNK: usize = 256;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for chunk in examples.chunks(CHUNK) {
        let batch = Batch::from_examples(chunk, spec.input_dim())?;
        let out = forward(spec, params, &batch)?;
        loss_sum += out.loss.mean_loss * chunk.len() as f64;
        correct += out.loss.correct_count;
    }
    Ok(LossValue {
        mean_loss: loss_sum / examples.len() as f64,
        correct_count: correct,
    })
}

pub fn accuracy(spec: &ModelSpec, params: &ParameterSet, examples: &[Example]) -> Result<f64> {
    let loss = evaluate(spec, params, examples)?;
    Ok(loss.correct_count as f64 / examples.len() as f64)
}

fn check_inputs<T>(spec: &ModelSpec, layers: &[&[T]], batch: &Batch) -> Result<()> {
    if layers.len() != spec.layer_count() {
        return Err(Error::shape(format!(
            "expected {} layers, found {}",
            spec.layer_count(),
            layers.len()
        )));
    }
    for (desc, values) in spec.layers().iter().zip(layers) {
        if values.len() != desc.param_count() {
            return Err(Error::shape(format!(
                "layer `{}` expects {} values, found {}",
                desc.name,
                desc.param_count(),
                values.len()
            )));
        }
    }
    if batch.input_dim() != spec.input_dim() {
        return Err(Error::shape(format!(
            "batch width {} does not match model input {}",
            batch.input_dim(),
            spec.input_dim()
        )));
    }
    if let Some(&bad) = batch.labels().iter().find(|&&y| y >= spec.num_classes()) {
        return Err(Error::arg(format!(
            "label {bad} out of range for {} classes",
            spec.num_classes()
        )));
    }
    Ok(())
}

/// `acts[0]` is the input, `acts[j + 1]` the output of layer `j`.
fn activations<T>(spec: &ModelSpec, layers: &[&[T]], batch: &Batch) -> Result<Vec<Vec<f64>>>
where
    T: Copy + Into<f64>,
{
    let rows = batch.len();
    let mut acts = Vec::with_capacity(spec.layer_count() + 1);
    acts.push(batch.inputs().iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
    for (idx, desc) in spec.layers().iter().enumerate() {
        let input = &acts[idx];
        let values = layers[idx];
        let mut out = match desc.kind {
            LayerKind::Dense => {
                let (n_in, n_out) = (desc.input_dim, desc.output_dim);
                let mut out = vec![0.0; rows * n_out];
                for b in 0..rows {
                    let x_row = &input[b * n_in..(b + 1) * n_in];
                    for o in 0..n_out {
                        let w_row = &values[o * n_in..(o + 1) * n_in];
                        let mut acc = 0.0;
                        for i in 0..n_in {
                            acc += w_row[i].into() * x_row[i];
                        }
                        out[b * n_out + o] = acc;
                    }
                }
                out
            }
            LayerKind::Bias => {
                let mut out = input.clone();
                for row in out.chunks_exact_mut(desc.output_dim) {
                    for (v, &b) in row.iter_mut().zip(values) {
                        *v += b.into();
                    }
                }
                out
            }
        };
        for v in &mut out {
            *v = desc.activation.apply(*v);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: desc.name.clone(),
            });
        }
        acts.push(out);
    }
    Ok(acts)
}

/// Returns the loss and, when requested, `∂loss/∂logits`.
fn cross_entropy(logits: &[f64], batch: &Batch, classes: usize, want_grad: bool) -> (LossValue, Vec<f64>) {
    let rows = batch.len();
    let total_weight: f64 = match batch.weights() {
        Some(w) => w.iter().sum(),
        None => rows as f64,
    };
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grad = if want_grad { vec![0.0; logits.len()] } else { Vec::new() };
    for (b, row) in logits.chunks_exact(classes).enumerate() {
        let label = batch.labels()[b];
        let coef = batch.weights().map_or(1.0, |w| w[b]) / total_weight;
        let mut best = 0;
        for (c, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
        let max = row[best];
        let denom: f64 = row.iter().map(|&z| libm::exp(z - max)).sum();
        let log_norm = max + libm::log(denom);
        loss += coef * (log_norm - row[label]);
        if want_grad {
            let g_row = &mut grad[b * classes..(b + 1) * classes];
            for (c, g) in g_row.iter_mut().enumerate() {
                let p = libm::exp(row[c] - log_norm);
                *g = coef * (p - if c == label { 1.0 } else { 0.0 });
            }
        }
    }
    (
        LossValue {
            mean_loss: if loss < 0.0 { 0.0 } else { loss },
            correct_count: correct,
        },
        grad,
    )
}
