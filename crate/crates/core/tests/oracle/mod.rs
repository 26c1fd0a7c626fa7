//! Straight-line reference implementations used as test oracles. The
//! reference loss, merge and TIES rule never call into the crate.

#![allow(dead_code)]

use mergeforge_core::{Activation, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// An MLP described by its layer widths, `[input, hidden.., classes]`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub hidden: Activation,
}

/// Loss plus the sign of every ReLU pre-activation, so callers can detect
/// a perturbation that crossed a kink.
pub struct Eval {
    pub loss: f64,
    pub relu_signs: Vec<bool>,
    pub min_relu_margin: f64,
}

impl Mlp {
    pub fn spec(&self) -> ModelSpec {
        let last = self.dims.len() - 1;
        ModelSpec::mlp(self.dims[0], &self.dims[1..last], self.dims[last], self.hidden).unwrap()
    }

    /// Parameter arrays in spec order: weight (out × in, row-major), bias.
    pub fn shapes(&self) -> Vec<usize> {
        self.dims
            .windows(2)
            .flat_map(|w| [w[0] * w[1], w[1]])
            .collect()
    }

    pub fn eval(&self, layers: &[Vec<f64>], xs: &[Vec<f64>], ys: &[usize]) -> Eval {
        let mut total = 0.0;
        let mut relu_signs = Vec::new();
        let mut min_relu_margin = f64::INFINITY;
        let depth = self.dims.len() - 1;
        for (x, &y) in xs.iter().zip(ys) {
            let mut h = x.clone();
            for l in 0..depth {
                let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
                let w = &layers[2 * l];
                let b = &layers[2 * l + 1];
                let mut z = vec![0.0; n_out];
                for o in 0..n_out {
                    let mut s = 0.0;
                    for i in 0..n_in {
                        s += w[o * n_in + i] * h[i];
                    }
                    z[o] = s + b[o];
                }
                if l + 1 < depth {
                    for v in &mut z {
                        match self.hidden {
                            Activation::Relu => {
                                relu_signs.push(*v > 0.0);
                                min_relu_margin = min_relu_margin.min(v.abs());
                                if *v < 0.0 {
                                    *v = 0.0;
                                }
                            }
                            Activation::Tanh => *v = v.tanh(),
                            Activation::Identity => {}
                        }
                    }
                }
                h = z;
            }
            let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - h[y];
        }
        Eval {
            loss: total / xs.len() as f64,
            relu_signs,
            min_relu_margin,
        }
    }

    pub fn loss(&self, layers: &[Vec<f64>], xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        self.eval(layers, xs, ys).loss
    }
}

/// `p + Σᵢ g(w[i][j]) · τᵢ(j)` in plain f64.
pub fn materialize(pretrained: &[Vec<f64>], tvs: &[Vec<Vec<f64>>], w: &[f64], use_tanh: bool) -> Vec<Vec<f64>> {
    let n = pretrained.len();
    pretrained
        .iter()
        .enumerate()
        .map(|(j, base)| {
            (0..base.len())
                .map(|e| {
                    let mut v = base[e];
                    for (i, tv) in tvs.iter().enumerate() {
                        let c = if use_tanh { w[i * n + j].tanh() } else { w[i * n + j] };
                        v += c * tv[j][e];
                    }
                    v
                })
                .collect()
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

/// A random MLP with 1–3 dense layers and widths up to `max_dim`.
pub fn random_mlp(rng: &mut ChaCha8Rng, max_dim: usize) -> Mlp {
    let hidden_layers = rng.random_range(0..=2);
    let mut dims = vec![rng.random_range(1..=max_dim)];
    for _ in 0..hidden_layers {
        dims.push(rng.random_range(1..=max_dim));
    }
    dims.push(rng.random_range(2..=max_dim.min(5)));
    let hidden = if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Tanh
    };
    Mlp { dims, hidden }
}

/// TIES by enumeration: per coordinate, split the surviving values by sign,
/// average each side and keep the side with the larger magnitude. Equal
/// magnitudes favour the positive side.
pub fn ties_coordinate(values: &[f64]) -> f64 {
    let pos: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
    let neg: Vec<f64> = values.iter().copied().filter(|v| *v < 0.0).collect();
    let avg = |xs: &[f64]| {
        // running mean, exact when all entries agree
        let mut m = 0.0;
        for (t, x) in xs.iter().enumerate() {
            m += (x - m) / (t + 1) as f64;
        }
        m
    };
    match (pos.is_empty(), neg.is_empty()) {
        (true, true) => 0.0,
        (false, true) => avg(&pos),
        (true, false) => avg(&neg),
        (false, false) => {
            let (p, n) = (avg(&pos), avg(&neg));
            if n.abs() > p { n } else { p }
        }
    }
}

/// Keeps the `keep` largest magnitudes by sorting; earlier positions win
/// ties.
pub fn trim(values: &[f64], keep: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; values.len()];
    for &i in idx.iter().take(keep) {
        out[i] = values[i];
    }
    out
}

/// One randomized check of `supermerge::grad_w` against central differences
/// of the straight-line loss. Returns the largest relative error, or `None`
/// when a perturbation crossed a ReLU kink and the instance is unusable.
pub fn grad_w_instance(seed: u64, h: f64, floor: f64) -> Option<f64> {
    use mergeforge_core::model::Layer;
    use mergeforge_core::supermerge::grad_w;
    use mergeforge_core::task_vector::DeltaLayer;
    use mergeforge_core::{Batch, MergeWeights, ParameterSet, TaskVector};

    let mut rng = rng(seed);
    let mlp = random_mlp(&mut rng, 8);
    let spec = mlp.spec();
    let k = rng.random_range(1..=3);
    let use_tanh = rng.random_bool(0.75);
    let shapes = mlp.shapes();
    let names: Vec<String> = spec.layers().iter().map(|l| l.name.clone()).collect();

    let p32: Vec<Vec<f32>> = shapes
        .iter()
        .map(|&len| uniform_vec(&mut rng, len, 0.8).into_iter().map(|v| v as f32).collect())
        .collect();
    let p64: Vec<Vec<f64>> = p32.iter().map(|l| l.iter().map(|&v| f64::from(v)).collect()).collect();
    let tvs64: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|_| shapes.iter().map(|&len| uniform_vec(&mut rng, len, 0.5)).collect())
        .collect();
    let w = uniform_vec(&mut rng, k * shapes.len(), 1.0);

    let rows = rng.random_range(1..=6);
    let classes = *mlp.dims.last().unwrap();
    let xs32: Vec<Vec<f32>> = (0..rows)
        .map(|_| uniform_vec(&mut rng, mlp.dims[0], 1.0).into_iter().map(|v| v as f32).collect())
        .collect();
    let xs: Vec<Vec<f64>> = xs32.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
    let ys: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();

    let pretrained = ParameterSet::from_layers(
        &spec,
        names
            .iter()
            .zip(&p32)
            .map(|(n, v)| Layer {
                name: n.clone(),
                values: v.clone(),
            })
            .collect(),
    )
    .unwrap();
    let tvs: Vec<TaskVector> = tvs64
        .iter()
        .enumerate()
        .map(|(i, layers)| {
            let layers = names
                .iter()
                .zip(layers)
                .map(|(n, v)| DeltaLayer {
                    name: n.clone(),
                    values: v.clone(),
                })
                .collect();
            TaskVector::from_layers(spec.id(), format!("t{i}"), layers).unwrap()
        })
        .collect();
    let weights = MergeWeights::new(tvs.iter().map(|t| t.source_task().to_string()).collect(), names, w.clone()).unwrap();
    let batch = Batch::new(xs32.concat(), ys.clone(), mlp.dims[0]).unwrap();
    let (_, analytic) = grad_w(&spec, &pretrained, &tvs, &weights, &batch, use_tanh).unwrap();

    let base = mlp.eval(&materialize(&p64, &tvs64, &w, use_tanh), &xs, &ys);
    let mut worst: f64 = 0.0;
    for idx in 0..w.len() {
        let loss_at = |delta: f64| {
            let mut shifted = w.clone();
            shifted[idx] += delta;
            let e = mlp.eval(&materialize(&p64, &tvs64, &shifted, use_tanh), &xs, &ys);
            (e.relu_signs == base.relu_signs).then_some(e.loss)
        };
        let numeric = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic[idx], numeric, floor));
    }
    Some(worst)
}
