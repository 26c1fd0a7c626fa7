//! Uniformly scaled merges: Task Arithmetic, DARE and TIES, plus the λ grid
//! search that picks their scaling coefficient on validation data.
//!
//! Every method reduces the task vectors to one merged direction `v` and
//! returns `θ_p + λ·v`:
//!
//! | method          | `v`                                        |
//! |-----------------|--------------------------------------------|
//! | Task Arithmetic | `Σ τᵢ`                                     |
//! | DARE            | `Σ τ̃ᵢ`, `τ̃ᵢ` = random drop + `1/(1−p)` rescale |
//! | TIES            | trim each `τᵢ` to its top entries, then per coordinate keep the sign group with the larger mean magnitude |
//! | DARE + TIES     | TIES over the DARE-sparsified vectors      |

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskExamples;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParameterSet};
use crate::nn;
use crate::rng;
use crate::task_vector::{self, DeltaLayer, TaskVector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeHyperParams {
    /// Scaling coefficient λ in `[0, 1]`.
    pub lambda: f64,
    /// DARE drop probability in `[0, 1)`.
    pub drop_prob: f64,
    /// Fraction of entries TIES keeps, in `(0, 1]`.
    pub density: f64,
    pub seed: u64,
}

impl Default for MergeHyperParams {
    fn default() -> Self {
        MergeHyperParams {
            lambda: 1.0,
            drop_prob: 0.9,
            density: 0.2,
            seed: 0,
        }
    }
}

impl MergeHyperParams {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        check_drop_prob(self.drop_prob)?;
        check_density(self.density)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::arg(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

fn check_drop_prob(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::arg(format!("drop probability must lie in [0, 1), got {p}")))
    }
}

fn check_density(density: f64) -> Result<()> {
    if density > 0.0 && density <= 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("density must lie in (0, 1], got {density}")))
    }
}

/// Elementwise sum of congruent task vectors.
pub fn sum_vectors(task_vectors: &[TaskVector]) -> Result<TaskVector> {
    let (first, rest) = task_vectors.split_first().ok_or(Error::Empty("task vector list"))?;
    let mut total = first.clone().with_source_task("sum");
    for tv in rest {
        task_vector::ensure_congruent(first, tv)?;
        for (acc, layer) in total.layers_mut().iter_mut().zip(tv.layers()) {
            for (a, v) in acc.values.iter_mut().zip(&layer.values) {
                *a += v;
            }
        }
    }
    Ok(total)
}

/// `θ_p + λ · Σ τᵢ`.
pub fn merge_task_arithmetic(pretrained: &ParameterSet, task_vectors: &[TaskVector], lambda: f64) -> Result<ParameterSet> {
    check_lambda(lambda)?;
    task_vector::apply(pretrained, &sum_vectors(task_vectors)?, lambda)
}

/// Drops each entry with probability `p` and rescales survivors by
/// `1/(1−p)`.
///
/// Entry `e` of layer `name` uses draw `e` of a stream keyed by
/// `(seed, name)`, so the mask does not depend on evaluation order.
pub fn dare_sparsify(tv: &TaskVector, p: f64, seed: u64) -> Result<TaskVector> {
    check_drop_prob(p)?;
    let scale = 1.0 / (1.0 - p);
    let layers = tv
        .layers()
        .iter()
        .map(|layer| {
            let mut stream = rng::keyed_stream(seed, "dare", &[layer.name.as_bytes()]);
            DeltaLayer {
                name: layer.name.clone(),
                values: layer
                    .values
                    .iter()
                    .map(|&v| {
                        let keep = stream.random::<f64>() >= p;
                        if keep {
                            v * scale
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            }
        })
        .collect();
    TaskVector::from_layers(tv.spec_id(), tv.source_task(), layers)
}

/// Seed for task `index` within a DARE merge.
pub fn dare_task_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, "dare-task", &[&(index as u64).to_le_bytes()])
}

fn dare_all(task_vectors: &[TaskVector], p: f64, seed: u64) -> Result<Vec<TaskVector>> {
    task_vectors
        .iter()
        .enumerate()
        .map(|(i, tv)| dare_sparsify(tv, p, dare_task_seed(seed, i)))
        .collect()
}

/// `θ_p + λ · Σ τ̃ᵢ`.
pub fn merge_dare(
    pretrained: &ParameterSet,
    task_vectors: &[TaskVector],
    p: f64,
    lambda: f64,
    seed: u64,
) -> Result<ParameterSet> {
    check_lambda(lambda)?;
    let sparse = dare_all(task_vectors, p, seed)?;
    merge_task_arithmetic(pretrained, &sparse, lambda)
}

/// Which entries compete for the TIES top-density budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimScope {
    /// One budget over the flattened vector.
    #[default]
    Global,
    /// A separate budget for each layer.
    PerLayer,
}

fn keep_count(density: f64, len: usize) -> usize {
    // guard against products like 0.1 * 30 landing a hair above an integer
    let target = density * len as f64;
    let k = libm::ceil(target - target * 4.0 * f64::EPSILON) as usize;
    k.min(len)
}

/// Zeroes all but the `⌈density · len⌉` largest-magnitude entries. Equal
/// magnitudes are ranked by position.
pub fn ties_trim(tv: &TaskVector, density: f64, scope: TrimScope) -> Result<TaskVector> {
    check_density(density)?;
    let mut out = tv.clone();
    match scope {
        TrimScope::Global => {
            let flat: Vec<f64> = tv.flat().collect();
            let keep = top_mask(&flat, keep_count(density, flat.len()));
            let mut cursor = 0;
            for layer in out.layers_mut() {
                for v in &mut layer.values {
                    if !keep[cursor] {
                        *v = 0.0;
                    }
                    cursor += 1;
                }
            }
        }
        TrimScope::PerLayer => {
            for layer in out.layers_mut() {
                let keep = top_mask(&layer.values, keep_count(density, layer.values.len()));
                for (v, k) in layer.values.iter_mut().zip(keep) {
                    if !k {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn top_mask(values: &[f64], keep: usize) -> Vec<bool> {
    let mut mask = alloc::vec![false; values.len()];
    if keep == 0 {
        return mask;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    let by_magnitude =
        |a: &usize, b: &usize| values[*b].abs().total_cmp(&values[*a].abs()).then(a.cmp(b));
    if keep < order.len() {
        order.select_nth_unstable_by(keep - 1, by_magnitude);
    }
    for &idx in &order[..keep] {
        mask[idx] = true;
    }
    mask
}

/// Sign election for one coordinate: the mean of the positive values or the
/// mean of the negative values, whichever has the larger magnitude. Equal
/// magnitudes pick the positive mean; no non-zero values give 0.
///
/// Means are running means, exact when all inputs agree.
pub fn elect(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut pos, mut pos_n, mut neg, mut neg_n) = (0.0, 0usize, 0.0, 0usize);
    for v in values {
        if v > 0.0 {
            pos_n += 1;
            pos += (v - pos) / pos_n as f64;
        } else if v < 0.0 {
            neg_n += 1;
            neg += (v - neg) / neg_n as f64;
        }
    }
    match (pos_n, neg_n) {
        (0, 0) => 0.0,
        (_, 0) => pos,
        (0, _) => neg,
        _ => {
            if -neg > pos {
                neg
            } else {
                pos
            }
        }
    }
}

/// Trims every vector, then elects each coordinate across models.
pub fn ties_merge_vector(task_vectors: &[TaskVector], density: f64, scope: TrimScope) -> Result<TaskVector> {
    let first = task_vectors.first().ok_or(Error::Empty("task vector list"))?;
    for tv in &task_vectors[1..] {
        task_vector::ensure_congruent(first, tv)?;
    }
    let trimmed = task_vectors
        .iter()
        .map(|tv| ties_trim(tv, density, scope))
        .collect::<Result<Vec<_>>>()?;
    let layers = first
        .layers()
        .iter()
        .enumerate()
        .map(|(j, layer)| DeltaLayer {
            name: layer.name.clone(),
            values: (0..layer.values.len())
                .map(|e| elect(trimmed.iter().map(|tv| tv.layers()[j].values[e])))
                .collect(),
        })
        .collect();
    TaskVector::from_layers(first.spec_id(), "ties", layers)
}

/// `θ_p + λ · ties_merge_vector(τ)`.
pub fn merge_ties(
    pretrained: &ParameterSet,
    task_vectors: &[TaskVector],
    density: f64,
    lambda: f64,
    scope: TrimScope,
) -> Result<ParameterSet> {
    check_lambda(lambda)?;
    let merged = ties_merge_vector(task_vectors, density, scope)?;
    task_vector::apply(pretrained, &merged, lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum BaselineMethod {
    TaskArithmetic,
    Dare {
        drop_prob: f64,
        seed: u64,
    },
    Ties {
        density: f64,
        #[serde(default)]
        scope: TrimScope,
    },
    DareTies {
        drop_prob: f64,
        density: f64,
        seed: u64,
        #[serde(default)]
        scope: TrimScope,
    },
}

impl BaselineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::TaskArithmetic => "task_arithmetic",
            BaselineMethod::Dare { .. } => "dare_ta",
            BaselineMethod::Ties { .. } => "ties",
            BaselineMethod::DareTies { .. } => "dare_ties",
        }
    }

    /// The merged direction `v` in `θ_p + λ·v`.
    pub fn direction(&self, task_vectors: &[TaskVector]) -> Result<TaskVector> {
        match *self {
            BaselineMethod::TaskArithmetic => sum_vectors(task_vectors),
            BaselineMethod::Dare { drop_prob, seed } => sum_vectors(&dare_all(task_vectors, drop_prob, seed)?),
            BaselineMethod::Ties { density, scope } => ties_merge_vector(task_vectors, density, scope),
            BaselineMethod::DareTies {
                drop_prob,
                density,
                seed,
                scope,
            } => ties_merge_vector(&dare_all(task_vectors, drop_prob, seed)?, density, scope),
        }
    }

    pub fn merge(&self, pretrained: &ParameterSet, task_vectors: &[TaskVector], lambda: f64) -> Result<ParameterSet> {
        check_lambda(lambda)?;
        task_vector::apply(pretrained, &self.direction(task_vectors)?, lambda)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub mean_accuracy: f64,
    /// `(task, accuracy)` in validation order.
    pub per_task: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub method: String,
    pub best_lambda: f64,
    /// One point per grid value, in grid order.
    pub points: Vec<LambdaPoint>,
}

/// `0.1, 0.2, …, 1.0`.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// Index of the best mean accuracy; ties go to the smaller λ.
pub fn select_lambda(points: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (idx, &(lambda, acc)) in points.iter().enumerate() {
        best = match best {
            None => Some(idx),
            Some(b) => {
                let (best_lambda, best_acc) = points[b];
                if acc > best_acc || (acc == best_acc && lambda < best_lambda) {
                    Some(idx)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Evaluates `θ_p + λ·v` on every task's validation set for each λ in `grid`.
pub fn grid_search_lambda(
    method: &BaselineMethod,
    grid: &[f64],
    spec: &ModelSpec,
    pretrained: &ParameterSet,
    task_vectors: &[TaskVector],
    validation: &[TaskExamples<'_>],
) -> Result<LambdaSweep> {
    if grid.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    for &lambda in grid {
        check_lambda(lambda)?;
    }
    if validation.is_empty() || validation.iter().any(|v| v.examples.is_empty()) {
        return Err(Error::Empty("validation set"));
    }
    let direction = method.direction(task_vectors)?;
    let mut points = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let merged = task_vector::apply(pretrained, &direction, lambda)?;
        let per_task = validation
            .iter()
            .map(|v| Ok((v.task.to_string(), nn::accuracy(spec, &merged, v.examples)?)))
            .collect::<Result<Vec<_>>>()?;
        let mean_accuracy = per_task.iter().map(|(_, a)| a).sum::<f64>() / per_task.len() as f64;
        points.push(LambdaPoint {
            lambda,
            mean_accuracy,
            per_task,
        });
    }
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.lambda, p.mean_accuracy)).collect();
    let best = select_lambda(&pairs).expect("grid is non-empty");
    Ok(LambdaSweep {
        method: method.name().to_string(),
        best_lambda: points[best].lambda,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Layer, ModelSpec};
    use alloc::vec;

    fn spec2() -> ModelSpec {
        ModelSpec::mlp(1, &[], 2, Activation::Relu).unwrap()
    }

    fn tv(spec: &ModelSpec, w: [f64; 2], b: [f64; 2]) -> TaskVector {
        TaskVector::from_layers(
            spec.id(),
            "t",
            vec![
                DeltaLayer {
                    name: "dense0.weight".into(),
                    values: w.to_vec(),
                },
                DeltaLayer {
                    name: "dense0.bias".into(),
                    values: b.to_vec(),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn task_arithmetic_example() {
        let s = spec2();
        let p = ParameterSet::zeros(&s);
        let merged =
            merge_task_arithmetic(&p, &[tv(&s, [1.0, 0.0], [0.0; 2]), tv(&s, [0.0, 1.0], [0.0; 2])], 0.3).unwrap();
        assert_eq!(merged.layers()[0].values, [0.3f32, 0.3]);
        assert!(merge_task_arithmetic(&p, &[], 0.3).is_err());
        assert!(merge_task_arithmetic(&p, &[tv(&s, [1.0, 0.0], [0.0; 2])], 1.5).is_err());
    }

    #[test]
    fn dare_rejects_p_one_and_keeps_p_zero() {
        let s = spec2();
        let t = tv(&s, [2.0, 4.0], [-1.0, 0.5]);
        assert!(dare_sparsify(&t, 1.0, 0).is_err());
        assert_eq!(dare_sparsify(&t, 0.0, 9).unwrap(), t);
    }

    #[test]
    fn dare_rescales_survivors() {
        let s = spec2();
        let t = tv(&s, [2.0, 4.0], [0.0, 0.0]);
        let both_kept = (0..1000u64)
            .map(|seed| dare_sparsify(&t, 0.5, seed).unwrap())
            .find(|d| d.layers()[0].values.iter().all(|&v| v != 0.0))
            .expect("some seed keeps both entries");
        assert_eq!(both_kept.layers()[0].values, [4.0, 8.0]);
        for seed in 0..50 {
            let d = dare_sparsify(&t, 0.5, seed).unwrap();
            for (&v, &orig) in d.layers()[0].values.iter().zip(&[2.0, 4.0]) {
                assert!(v == 0.0 || v == 2.0 * orig);
            }
        }
    }

    #[test]
    fn dare_is_seeded() {
        let s = spec2();
        let t = tv(&s, [2.0, 4.0], [1.0, 3.0]);
        assert_eq!(dare_sparsify(&t, 0.5, 3).unwrap(), dare_sparsify(&t, 0.5, 3).unwrap());
    }

    #[test]
    fn keep_count_rounds_up() {
        assert_eq!(keep_count(0.2, 1000), 200);
        assert_eq!(keep_count(0.1, 30), 3);
        assert_eq!(keep_count(0.25, 10), 3);
        assert_eq!(keep_count(1.0, 7), 7);
        assert_eq!(keep_count(1e-9, 7), 1);
    }

    #[test]
    fn trim_keeps_largest_magnitudes() {
        let s = spec2();
        let t = tv(&s, [0.1, -0.5], [0.3, -0.2]);
        let g = ties_trim(&t, 0.5, TrimScope::Global).unwrap();
        assert_eq!(g.flat().collect::<Vec<_>>(), [0.0, -0.5, 0.3, 0.0]);
        let l = ties_trim(&t, 0.5, TrimScope::PerLayer).unwrap();
        assert_eq!(l.flat().collect::<Vec<_>>(), [0.0, -0.5, 0.3, 0.0]);
        let l = ties_trim(&tv(&s, [0.9, 0.8], [0.1, -0.2]), 0.5, TrimScope::PerLayer).unwrap();
        assert_eq!(l.flat().collect::<Vec<_>>(), [0.9, 0.0, 0.0, -0.2]);
        let tie = ties_trim(&tv(&s, [0.5, -0.5], [0.5, 0.5]), 0.5, TrimScope::Global).unwrap();
        assert_eq!(tie.flat().collect::<Vec<_>>(), [0.5, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn election_examples() {
        assert_eq!(elect([0.3, 0.2, -0.1]), 0.25);
        assert_eq!(elect([0.1, -0.4]), -0.4);
        assert_eq!(elect([0.2, -0.2]), 0.2);
        assert_eq!(elect([0.0, 0.0]), 0.0);
        assert_eq!(elect([]), 0.0);
    }

    #[test]
    fn ties_unanimous_is_identity() {
        let s = spec2();
        let t = tv(&s, [0.1, -0.5], [0.3, -0.2]);
        let merged = ties_merge_vector(&[t.clone(), t.clone(), t.clone()], 1.0, TrimScope::Global).unwrap();
        assert_eq!(merged.flat().collect::<Vec<_>>(), t.flat().collect::<Vec<_>>());
    }

    #[test]
    fn lambda_selection_prefers_smaller_on_ties() {
        assert_eq!(select_lambda(&[(0.5, 0.8), (0.2, 0.8), (0.9, 0.7)]), Some(1));
        assert_eq!(select_lambda(&[(0.3, 0.1)]), Some(0));
        assert_eq!(select_lambda(&[]), None);
    }

    #[test]
    fn grid_search_rejects_empty_validation() {
        let s = spec2();
        let p = ParameterSet::zeros(&s);
        let t = tv(&s, [1.0, 0.0], [0.0; 2]);
        let err = grid_search_lambda(&BaselineMethod::TaskArithmetic, &[0.5], &s, &p, core::slice::from_ref(&t), &[]);
        assert_eq!(err, Err(Error::Empty("validation set")));
        let none: [crate::Example; 0] = [];
        let val = [TaskExamples {
            task: "a",
            examples: &none,
        }];
        assert!(grid_search_lambda(&BaselineMethod::TaskArithmetic, &[0.5], &s, &p, &[t], &val).is_err());
    }

    #[test]
    fn singleton_grid() {
        let s = spec2();
        let p = ParameterSet::from_layers(
            &s,
            vec![
                Layer {
                    name: "dense0.weight".into(),
                    values: vec![1.0, -1.0],
                },
                Layer {
                    name: "dense0.bias".into(),
                    values: vec![0.0, 0.0],
                },
            ],
        )
        .unwrap();
        let ex = [crate::Example {
            id: 0,
            x: vec![1.0],
            y: 0,
        }];
        let val = [TaskExamples {
            task: "a",
            examples: &ex,
        }];
        let t = tv(&s, [1.0, 0.0], [0.0; 2]);
        let sweep = grid_search_lambda(&BaselineMethod::TaskArithmetic, &[0.4], &s, &p, &[t], &val).unwrap();
        assert_eq!(sweep.best_lambda, 0.4);
        assert_eq!(sweep.points.len(), 1);
        assert_eq!(sweep.points[0].mean_accuracy, 1.0);
    }
}
