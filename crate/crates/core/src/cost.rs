//! Analytic peak-memory and FLOPs model.
//!
//! Peak memory counts four-byte model weights and gradients, eight bytes of
//! AdamW state per trainable parameter and, when merging, `k` resident task
//! vectors:
//!
//! ```text
//! bytes = 4·N_para + 4·N_trainable + 8·N_trainable + [merging]·4·k·N_task_vector
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::ExecutionTrace;

/// FLOPs per sample and parameter, by role.
///
/// `merge_backward_fraction` is the share of the model a merge-weight fit
/// back-propagates through, relative to full training. `scale` multiplies
/// every estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlopsCoefficients {
    pub fwd_coeff: f64,
    pub train_coeff: f64,
    pub merge_backward_fraction: f64,
    pub scale: f64,
}

impl Default for FlopsCoefficients {
    fn default() -> Self {
        FlopsCoefficients {
            fwd_coeff: 2.0,
            train_coeff: 4.0,
            merge_backward_fraction: 1.0,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInput {
    /// Total model parameters.
    pub n_para: u64,
    /// Parameters that receive gradients and optimizer state.
    pub n_trainable: u64,
    /// Entries in one task vector.
    pub n_task_vector: u64,
    /// Task vectors held at once while merging.
    pub k: u64,
    pub is_merging: bool,
    /// Samples processed per epoch.
    pub n_samples: u64,
    #[serde(default)]
    pub flops: FlopsCoefficients,
}

impl CostInput {
    pub fn validate(&self) -> Result<()> {
        if self.is_merging && self.k == 0 {
            return Err(Error::arg("merging needs k >= 1"));
        }
        Ok(())
    }
}

pub fn peak_memory_bytes(c: &CostInput) -> Result<u128> {
    c.validate()?;
    let overflow = || Error::arg("peak memory overflows 128 bits");
    let weights = 4u128 * u128::from(c.n_para);
    let gradients = 4u128 * u128::from(c.n_trainable);
    let optimizer = 8u128 * u128::from(c.n_trainable);
    let task_vectors = if c.is_merging {
        4u128
            .checked_mul(u128::from(c.k))
            .and_then(|v| v.checked_mul(u128::from(c.n_task_vector)))
            .ok_or_else(overflow)?
    } else {
        0
    };
    weights
        .checked_add(gradients)
        .and_then(|v| v.checked_add(optimizer))
        .and_then(|v| v.checked_add(task_vectors))
        .ok_or_else(overflow)
}

pub fn to_gb(bytes: u128) -> f64 {
    bytes as f64 / 1e9
}

pub fn to_gib(bytes: u128) -> f64 {
    bytes as f64 / (1u64 << 30) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsMode {
    /// Forward plus backward and update over the trainable parameters.
    Training,
    /// Forward plus a backward pass through the model to reach the merge
    /// weights.
    MergeFit,
    /// Forward only.
    Inference,
}

/// Per-sample, per-epoch cost before `scale`.
fn per_sample(c: &CostInput, mode: FlopsMode) -> f64 {
    let f = &c.flops;
    let n_para = c.n_para as f64;
    match mode {
        FlopsMode::Inference => f.fwd_coeff * n_para,
        FlopsMode::Training => f.fwd_coeff * n_para + f.train_coeff * c.n_trainable as f64,
        FlopsMode::MergeFit => (f.fwd_coeff + f.train_coeff * f.merge_backward_fraction) * n_para,
    }
}

/// `scale · n_samples · per-sample cost` for `mode`.
pub fn flops_per_epoch(c: &CostInput, mode: FlopsMode) -> Result<f64> {
    let f = &c.flops;
    if !(f.fwd_coeff > 0.0 && f.train_coeff > 0.0 && f.scale > 0.0 && f.merge_backward_fraction >= 0.0) {
        return Err(Error::arg("FLOPs coefficients must be positive"));
    }
    Ok(f.scale * c.n_samples as f64 * per_sample(c, mode))
}

/// A measured FLOPs figure to calibrate against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsTarget {
    pub mode: FlopsMode,
    pub n_para: u64,
    pub n_trainable: u64,
    pub n_samples: u64,
    pub flops: f64,
}

/// Fits `merge_backward_fraction` and `scale` to `targets`, keeping the
/// forward and training coefficients fixed.
///
/// The fraction comes from the ratio of merge-fit to inference cost per
/// sample and parameter (geometric mean over rows). The scale then minimizes
/// squared log error over all rows.
pub fn calibrate_flops(fwd_coeff: f64, train_coeff: f64, targets: &[FlopsTarget]) -> Result<FlopsCoefficients> {
    if targets.is_empty() {
        return Err(Error::Empty("calibration targets"));
    }
    if targets.iter().any(|t| !(t.flops > 0.0) || t.n_samples == 0 || t.n_para == 0) {
        return Err(Error::arg("calibration targets need positive FLOPs, samples and parameters"));
    }
    let density = |mode: FlopsMode| -> Option<f64> {
        let logs: alloc::vec::Vec<f64> = targets
            .iter()
            .filter(|t| t.mode == mode)
            .map(|t| libm::log(t.flops / (t.n_samples as f64 * t.n_para as f64)))
            .collect();
        (!logs.is_empty()).then(|| libm::exp(logs.iter().sum::<f64>() / logs.len() as f64))
    };
    let mut coeffs = FlopsCoefficients {
        fwd_coeff,
        train_coeff,
        merge_backward_fraction: 1.0,
        scale: 1.0,
    };
    if let (Some(merge), Some(inference)) = (density(FlopsMode::MergeFit), density(FlopsMode::Inference)) {
        let ratio = merge / inference;
        coeffs.merge_backward_fraction = (fwd_coeff * (ratio - 1.0) / train_coeff).max(0.0);
    }
    let mut log_sum = 0.0;
    for t in targets {
        let input = CostInput {
            n_para: t.n_para,
            n_trainable: t.n_trainable,
            n_task_vector: 0,
            k: 1,
            is_merging: false,
            n_samples: t.n_samples,
            flops: coeffs,
        };
        log_sum += libm::log(t.flops / flops_per_epoch(&input, t.mode)?);
    }
    coeffs.scale = libm::exp(log_sum / targets.len() as f64);
    Ok(coeffs)
}

/// Peak memory implied by an executed merge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakModel {
    /// Full parameter sets resident at once, merged output included.
    pub peak_concurrent_models: usize,
    /// Task vectors resident at once; the `k` of the memory formula.
    pub resident_task_vectors: usize,
    pub bytes: u128,
}

/// Evaluates the memory formula with `k` set to the widest node of `trace`.
pub fn measure_peak_models(trace: &ExecutionTrace, base: &CostInput) -> Result<PeakModel> {
    if trace.entries.is_empty() || trace.max_fan_in == 0 {
        return Err(Error::Empty("execution trace"));
    }
    let input = CostInput {
        k: trace.max_fan_in as u64,
        is_merging: true,
        ..*base
    };
    Ok(PeakModel {
        peak_concurrent_models: trace.peak_concurrent_models,
        resident_task_vectors: trace.max_fan_in,
        bytes: peak_memory_bytes(&input)?,
    })
}
