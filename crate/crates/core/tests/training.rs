mod oracle;

use mergeforge_core::merge::{grid_search_lambda, BaselineMethod};
use mergeforge_core::optim::OptimizerConfig;
use mergeforge_core::supermerge::{self, materialize, LossBalance};
use mergeforge_core::task_vector::{compute_named, layer_stats};
use mergeforge_core::train::{train_on, TrainConfig};
use mergeforge_core::{nn, Activation, Example, FitConfig, MergeWeights, ModelSpec, ParameterSet, TaskExamples};
use rand::Rng;

/// Two classes separated by the line `x₀ + x₁ = 0` with a margin.
fn separable(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = oracle::rng(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: Vec<f32> = (0..2).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let s = x[0] + x[1];
        if s.abs() < 0.1 {
            continue;
        }
        out.push(Example {
            id: out.len() as u64,
            x,
            y: usize::from(s > 0.0),
        });
    }
    out
}

/// Four classes by quadrant, with the labels of quadrants permuted per task.
fn quadrants(n: usize, seed: u64, labels: [usize; 4]) -> Vec<Example> {
    let mut rng = oracle::rng(seed);
    (0..n)
        .map(|i| {
            let x: Vec<f32> = (0..2).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let q = usize::from(x[0] > 0.0) + 2 * usize::from(x[1] > 0.0);
            Example {
                id: i as u64,
                x,
                y: labels[q],
            }
        })
        .collect()
}

fn accuracy(spec: &ModelSpec, params: &ParameterSet, examples: &[Example]) -> f64 {
    nn::accuracy(spec, params, examples).unwrap()
}

#[test]
fn separable_toy_is_learned() {
    let spec = ModelSpec::mlp(2, &[8], 2, Activation::Relu).unwrap();
    let data = separable(200, 1);
    let cfg = TrainConfig {
        epochs: 100,
        optimizer: OptimizerConfig::adamw(1e-2),
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train_on(&spec, &ParameterSet::init(&spec, 0), &data, &cfg).unwrap();
    assert!(accuracy(&spec, &out.params, &data) >= 0.99);
    assert_eq!(out.epoch_losses.len(), 100);
    assert!(out.epoch_losses[99] < out.epoch_losses[0]);
}

#[test]
fn training_is_deterministic() {
    let spec = ModelSpec::mlp(2, &[6], 2, Activation::Tanh).unwrap();
    let data = separable(64, 2);
    let cfg = TrainConfig {
        epochs: 5,
        seed: 9,
        ..TrainConfig::default()
    };
    let init = ParameterSet::init(&spec, 4);
    let a = train_on(&spec, &init, &data, &cfg).unwrap();
    let b = train_on(&spec, &init, &data, &cfg).unwrap();
    assert!(a.params.bit_eq(&b.params));
    assert_eq!(a.epoch_losses, b.epoch_losses);
    let other = train_on(&spec, &init, &data, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert!(!a.params.bit_eq(&other.params));
}

#[test]
fn different_tasks_leave_different_layer_profiles() {
    let spec = ModelSpec::mlp(2, &[12, 8], 4, Activation::Relu).unwrap();
    let init = ParameterSet::init(&spec, 0);
    let cfg = TrainConfig {
        epochs: 20,
        optimizer: OptimizerConfig::adamw(1e-2),
        ..TrainConfig::default()
    };
    let a = train_on(&spec, &init, &quadrants(200, 1, [0, 1, 2, 3]), &cfg).unwrap();
    let b = train_on(&spec, &init, &quadrants(200, 2, [3, 3, 0, 0]), &cfg).unwrap();
    let sa = layer_stats(&compute_named(&a.params, &init, "a").unwrap()).unwrap();
    let sb = layer_stats(&compute_named(&b.params, &init, "b").unwrap()).unwrap();
    let std_a: Vec<f64> = sa.iter().map(|s| s.std).collect();
    let std_b: Vec<f64> = sb.iter().map(|s| s.std).collect();
    assert_eq!(std_a.len(), spec.layer_count());
    assert_ne!(std_a, std_b);
}

struct SingleTask {
    spec: ModelSpec,
    pretrained: ParameterSet,
    fine_tuned: ParameterSet,
    validation: Vec<Example>,
}

/// A task the pretrained model gets wrong and a fine-tuned model solves.
fn single_task() -> SingleTask {
    let spec = ModelSpec::mlp(2, &[8], 4, Activation::Relu).unwrap();
    let train_set = quadrants(400, 5, [2, 0, 3, 1]);
    let pretrain = quadrants(400, 6, [0, 1, 2, 3]);
    let cfg = TrainConfig {
        epochs: 40,
        optimizer: OptimizerConfig::adamw(1e-2),
        ..TrainConfig::default()
    };
    let pretrained = train_on(&spec, &ParameterSet::init(&spec, 0), &pretrain, &cfg)
        .unwrap()
        .params;
    let fine_tuned = train_on(&spec, &pretrained, &train_set, &cfg).unwrap().params;
    SingleTask {
        spec,
        pretrained,
        fine_tuned,
        validation: quadrants(200, 7, [2, 0, 3, 1]),
    }
}

#[test]
fn grid_search_prefers_the_recovery_point() {
    let t = single_task();
    let tv = compute_named(&t.fine_tuned, &t.pretrained, "q").unwrap();
    let val = [TaskExamples {
        task: "q",
        examples: &t.validation,
    }];
    let sweep = grid_search_lambda(
        &BaselineMethod::TaskArithmetic,
        &[0.0, 1.0],
        &t.spec,
        &t.pretrained,
        std::slice::from_ref(&tv),
        &val,
    )
    .unwrap();
    assert!(sweep.points[0].mean_accuracy < sweep.points[1].mean_accuracy);
    assert_eq!(sweep.best_lambda, 1.0);
    assert_eq!(sweep.points.len(), 2);

    let single = grid_search_lambda(&BaselineMethod::TaskArithmetic, &[0.4], &t.spec, &t.pretrained, &[tv], &val).unwrap();
    assert_eq!(single.best_lambda, 0.4);
}

#[test]
fn single_model_fit_moves_towards_the_fine_tuned_model() {
    // anchor at the random init, so the task vector alone solves the task
    let spec = ModelSpec::mlp(2, &[8], 4, Activation::Relu).unwrap();
    let pretrained = ParameterSet::init(&spec, 0);
    let cfg = TrainConfig {
        epochs: 40,
        optimizer: OptimizerConfig::adamw(1e-2),
        ..TrainConfig::default()
    };
    let fine_tuned = train_on(&spec, &pretrained, &quadrants(400, 5, [2, 0, 3, 1]), &cfg)
        .unwrap()
        .params;
    let validation = quadrants(400, 7, [2, 0, 3, 1]);
    let val = [TaskExamples {
        task: "q",
        examples: &validation,
    }];

    let tv = compute_named(&fine_tuned, &pretrained, "q").unwrap();
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let sweep = grid_search_lambda(&BaselineMethod::TaskArithmetic, &grid, &spec, &pretrained, &[tv], &val).unwrap();
    assert_eq!(sweep.best_lambda, 1.0, "the toy must peak at the fine-tuned model");

    let out = supermerge::fit_models(&spec, &pretrained, &[("q", &fine_tuned)], &val, &FitConfig::default()).unwrap();
    let mean_coeff = out.weights.effective(true).iter().sum::<f64>() / out.weights.n() as f64;
    assert!(mean_coeff >= 0.8, "mean tanh(w) = {mean_coeff}");
    let fine = accuracy(&spec, &fine_tuned, &validation);
    let merged = accuracy(&spec, &out.merged, &validation);
    assert!(merged >= fine - 0.02, "{merged} vs {fine}");
    assert_eq!(out.loss_trace.len(), 51);
}

#[test]
fn zero_learning_rate_fit_keeps_the_initial_weights() {
    let t = single_task();
    let val = [TaskExamples {
        task: "q",
        examples: &t.validation,
    }];
    let tv = compute_named(&t.fine_tuned, &t.pretrained, "q").unwrap();
    let cfg = FitConfig {
        epochs: 3,
        optimizer: OptimizerConfig::adamw(0.0),
        init_value: 0.3,
        ..FitConfig::default()
    };
    let out = supermerge::fit(&t.spec, &t.pretrained, std::slice::from_ref(&tv), &val, &cfg).unwrap();
    let init = MergeWeights::for_task_vectors(std::slice::from_ref(&tv), 0.3).unwrap();
    assert_eq!(out.weights, init);
    assert!(out.merged.bit_eq(&materialize(&t.pretrained, &[tv], &init, true).unwrap()));
}

#[test]
fn fit_is_deterministic_per_seed() {
    let t = single_task();
    let other = quadrants(100, 11, [1, 2, 3, 0]);
    let val = [
        TaskExamples {
            task: "q",
            examples: &t.validation,
        },
        TaskExamples {
            task: "r",
            examples: &other,
        },
    ];
    let tvs = [
        compute_named(&t.fine_tuned, &t.pretrained, "q").unwrap(),
        compute_named(&ParameterSet::init(&t.spec, 3), &t.pretrained, "r").unwrap(),
    ];
    let cfg = FitConfig {
        epochs: 4,
        seed: 5,
        balance: LossBalance::UniformOverTasks,
        ..FitConfig::default()
    };
    let a = supermerge::fit(&t.spec, &t.pretrained, &tvs, &val, &cfg).unwrap();
    let b = supermerge::fit(&t.spec, &t.pretrained, &tvs, &val, &cfg).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.weights.trainable_count(), 2 * t.spec.layer_count());
}

#[test]
fn convex_surrogate_loss_never_increases() {
    // softmax regression: the loss is convex in θ and θ is affine in W
    let spec = ModelSpec::mlp(2, &[], 4, Activation::Identity).unwrap();
    let p = ParameterSet::init(&spec, 1);
    let examples = quadrants(120, 3, [0, 1, 2, 3]);
    let tvs: Vec<_> = (0..3)
        .map(|i| compute_named(&ParameterSet::init(&spec, 50 + i), &p, &format!("t{i}")).unwrap())
        .collect();
    let val = [TaskExamples {
        task: "q",
        examples: &examples,
    }];
    let cfg = FitConfig {
        epochs: 40,
        batch_size: examples.len(),
        optimizer: OptimizerConfig::sgd(0.05),
        use_tanh: false,
        ..FitConfig::default()
    };
    let out = supermerge::fit(&spec, &p, &tvs, &val, &cfg).unwrap();
    for pair in out.loss_trace.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-6, "{pair:?}");
    }
    assert!(out.loss_trace[40] < out.loss_trace[0]);
}
