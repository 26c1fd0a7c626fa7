//! The end-to-end benchmark: train, merge with every method, evaluate and
//! rank.

use std::path::Path;

use mergeforge_core::cost::{
    flops_per_epoch, measure_peak_models, peak_memory_bytes, to_gb, to_gib, CostInput, FlopsMode,
};
use mergeforge_core::hierarchy::{build_plan_by_similarity, execute, ExecutionTrace, MergePlan, NodeReport};
use mergeforge_core::merge::{grid_search_lambda, LambdaSweep};
use mergeforge_core::rng::derive_seed;
use mergeforge_core::task_vector::{compute_named, layer_stats, LayerStats};
use mergeforge_core::train::{train_on, TrainConfig};
use mergeforge_core::{nn, DatasetSplit, Example, FitConfig, MergeWeights, ModelSpec, ParameterSet, TaskExamples, TaskVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Config, Method};
use crate::error::{Error, Result};
use crate::store::DirectoryStore;
use crate::suite::{generate_suite, TaskSuite};

/// Models shared by every method run.
pub struct TrainedSuite {
    pub spec: ModelSpec,
    pub pretrained: ParameterSet,
    /// One per in-domain task, in suite order.
    pub fine_tuned: Vec<ParameterSet>,
    pub task_vectors: Vec<TaskVector>,
}

fn seeded(cfg: &TrainConfig, seed: u64, domain: &str, part: &str) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, domain, &[part.as_bytes(), &cfg.seed.to_le_bytes()]),
        ..*cfg
    }
}

/// Pretrains on the mixture and fine-tunes one model per in-domain task.
pub fn train_suite(suite: &TaskSuite, cfg: &Config, seed: u64) -> Result<TrainedSuite> {
    let mix = &suite.pretrain_mixture;
    let spec = cfg.training.model_spec(mix.input_dim, mix.num_classes)?;
    let init = ParameterSet::init(&spec, derive_seed(seed, "init", &[]));
    let pre_cfg = seeded(&cfg.training.pretrain, seed, "pretrain", "");
    let pretrained = train_on(&spec, &init, &mix.train, &pre_cfg)?.params;

    let fine_tuned = suite
        .in_domain_tasks
        .par_iter()
        .map(|task| {
            let ft_cfg = seeded(&cfg.training.finetune, seed, "finetune", &task.task_name);
            Ok(train_on(&spec, &pretrained, &task.train, &ft_cfg)?.params)
        })
        .collect::<Result<Vec<_>>>()?;
    let task_vectors = suite
        .in_domain_tasks
        .iter()
        .zip(&fine_tuned)
        .map(|(task, ft)| compute_named(ft, &pretrained, &task.task_name))
        .collect::<mergeforge_core::Result<Vec<_>>>()?;
    Ok(TrainedSuite {
        spec,
        pretrained,
        fine_tuned,
        task_vectors,
    })
}

/// One task's score for a method. `rank` is absent for reference rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: String,
    pub in_domain: bool,
    pub accuracy: Option<f64>,
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: Method,
    pub reference: bool,
    pub scores: Vec<TaskScore>,
    pub in_domain_accuracy: Option<f64>,
    pub in_domain_rank: Option<f64>,
    pub out_of_domain_accuracy: Option<f64>,
    pub out_of_domain_rank: Option<f64>,
}

/// Weights learned by a merge-weight fit.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedWeights {
    pub method: Method,
    pub weights: MergeWeights,
    pub use_tanh: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyRun {
    pub plan: MergePlan,
    pub nodes: Vec<NodeReport>,
    pub trace: ExecutionTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub row: String,
    pub parameters: u64,
    pub trainable: u64,
    pub task_vectors_resident: u64,
    pub peak_memory_bytes: u128,
    pub peak_memory_gb: f64,
    pub peak_memory_gib: f64,
    pub samples: u64,
    pub flops_per_epoch: f64,
}

pub struct BenchResult {
    pub seed: u64,
    pub in_domain: Vec<String>,
    pub out_of_domain: Vec<String>,
    pub reports: Vec<MethodReport>,
    pub sweeps: Vec<LambdaSweep>,
    pub learned: Vec<LearnedWeights>,
    pub hierarchy: Option<HierarchyRun>,
    /// Peak resident models of the flat SuperMerge run.
    pub flat_peak_models: Option<usize>,
    pub layer_stats: Vec<(String, Vec<LayerStats>)>,
    pub cost_rows: Vec<CostRow>,
}

impl BenchResult {
    pub fn report(&self, method: Method) -> Option<&MethodReport> {
        self.reports.iter().find(|r| r.method == method)
    }

    pub fn sweep(&self, method: Method) -> Option<&LambdaSweep> {
        self.sweeps.iter().find(|s| s.method == method.name())
    }
}

/// What a single method run produced.
struct Outcome {
    method: Method,
    /// Accuracy per task, in-domain tasks first.
    accuracies: Vec<Option<f64>>,
    sweep: Option<LambdaSweep>,
    learned: Option<LearnedWeights>,
    hierarchy: Option<HierarchyRun>,
    flat_trace: Option<ExecutionTrace>,
}

impl Outcome {
    fn new(method: Method, accuracies: Vec<Option<f64>>) -> Self {
        Outcome {
            method,
            accuracies,
            sweep: None,
            learned: None,
            hierarchy: None,
            flat_trace: None,
        }
    }
}

struct Context<'a> {
    suite: &'a TaskSuite,
    trained: &'a TrainedSuite,
    cfg: &'a Config,
    seed: u64,
    work_dir: &'a Path,
}

impl Context<'_> {
    fn evaluate(&self, params: &ParameterSet) -> Result<Vec<Option<f64>>> {
        self.suite
            .all_tasks()
            .map(|t| Ok(Some(nn::accuracy(&self.trained.spec, params, &t.test)?)))
            .collect()
    }

    fn validation(&self) -> Result<Vec<TaskExamples<'_>>> {
        self.suite
            .in_domain_tasks
            .iter()
            .map(|t| {
                if t.validation.is_empty() {
                    Err(Error::MissingValidation(t.task_name.clone()))
                } else {
                    Ok(t.validation_view())
                }
            })
            .collect()
    }

    fn fit_config(&self, use_tanh: bool) -> FitConfig {
        let sm = &self.cfg.supermerge;
        FitConfig {
            use_tanh,
            seed: derive_seed(self.seed, "supermerge", &[&sm.seed.to_le_bytes()]),
            ..*sm
        }
    }

    fn run_plan(&self, method: Method, plan: &MergePlan, use_tanh: bool) -> Result<mergeforge_core::hierarchy::HierarchicalOutcome> {
        let t = self.trained;
        let models: Vec<&ParameterSet> = t.fine_tuned.iter().collect();
        let mut store = DirectoryStore::with_models(self.work_dir.join(method.name()), &t.spec, &models)?;
        let validation = self.validation()?;
        let out = execute(&t.spec, plan, &t.pretrained, &mut store, &validation, &self.fit_config(use_tanh));
        store.remove()?;
        Ok(out?)
    }

    fn run(&self, method: Method) -> Result<Outcome> {
        let t = self.trained;
        let n_in = self.suite.in_domain_tasks.len();
        match method {
            Method::Pretrained => Ok(Outcome::new(method, self.evaluate(&t.pretrained)?)),
            Method::Individual => {
                let mut acc = t
                    .fine_tuned
                    .iter()
                    .zip(&self.suite.in_domain_tasks)
                    .map(|(ft, task)| Ok(Some(nn::accuracy(&t.spec, ft, &task.test)?)))
                    .collect::<Result<Vec<_>>>()?;
                acc.resize(n_in + self.suite.out_of_domain_tasks.len(), None);
                Ok(Outcome::new(method, acc))
            }
            Method::Multitask => {
                let union: Vec<Example> = self
                    .suite
                    .in_domain_tasks
                    .iter()
                    .enumerate()
                    .flat_map(|(i, task)| {
                        // ids are only unique within a task
                        task.train.iter().map(move |ex| Example {
                            id: ((i as u64) << 32) | ex.id,
                            ..ex.clone()
                        })
                    })
                    .collect();
                let mt_cfg = seeded(&self.cfg.training.multitask, self.seed, "multitask", "");
                let params = train_on(&t.spec, &t.pretrained, &union, &mt_cfg)?.params;
                Ok(Outcome::new(method, self.evaluate(&params)?))
            }
            Method::TaskArithmetic | Method::DareTa | Method::Ties | Method::DareTies => {
                let dare_seed = derive_seed(self.seed, "dare", &[]);
                let baseline = self.cfg.methods.baseline(method, dare_seed).expect("baseline method");
                let validation = self.validation()?;
                let sweep = grid_search_lambda(
                    &baseline,
                    &self.cfg.methods.lambda_grid,
                    &t.spec,
                    &t.pretrained,
                    &t.task_vectors,
                    &validation,
                )?;
                let merged = baseline.merge(&t.pretrained, &t.task_vectors, sweep.best_lambda)?;
                let mut out = Outcome::new(method, self.evaluate(&merged)?);
                out.sweep = Some(sweep);
                Ok(out)
            }
            Method::Supermerge | Method::SupermergeNoTanh => {
                let use_tanh = method == Method::Supermerge;
                let plan = MergePlan::flat(n_in)?;
                let run = self.run_plan(method, &plan, use_tanh)?;
                let mut out = Outcome::new(method, self.evaluate(&run.merged)?);
                let root = run.reports.into_iter().last().expect("flat plan has a root");
                out.learned = Some(LearnedWeights {
                    method,
                    weights: root.weights,
                    use_tanh,
                });
                out.flat_trace = Some(run.trace);
                Ok(out)
            }
            Method::Hierarchical => {
                let h = &self.cfg.hierarchical;
                let plan = match &h.plan {
                    Some(root) => MergePlan::new(root.clone(), h.fan_in_limit, n_in)?,
                    None => build_plan_by_similarity(&t.task_vectors, h.fan_in_limit)?,
                };
                let run = self.run_plan(method, &plan, self.cfg.supermerge.use_tanh)?;
                let mut out = Outcome::new(method, self.evaluate(&run.merged)?);
                out.hierarchy = Some(HierarchyRun {
                    plan,
                    nodes: run.reports,
                    trace: run.trace,
                });
                Ok(out)
            }
        }
    }
}

/// Competition ranks ("1224") over `keys`, larger is better.
pub fn competition_ranks<K: Ord>(keys: &[K]) -> Vec<usize> {
    keys.iter()
        .map(|k| 1 + keys.iter().filter(|other| *other > k).count())
        .collect()
}

/// Accuracy rounded to 4 decimals, the resolution at which ranks tie.
pub fn rank_key(accuracy: f64) -> i64 {
    (accuracy * 1e4).round() as i64
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Builds the reports, ranking the non-reference methods task by task.
pub fn rank_methods(
    methods: &[Method],
    accuracies: &[Vec<Option<f64>>],
    in_domain: &[String],
    out_of_domain: &[String],
) -> Vec<MethodReport> {
    let tasks: Vec<(&String, bool)> = in_domain
        .iter()
        .map(|t| (t, true))
        .chain(out_of_domain.iter().map(|t| (t, false)))
        .collect();
    let ranked: Vec<usize> = (0..methods.len()).filter(|&i| !methods[i].is_reference()).collect();
    let mut ranks = vec![vec![None; tasks.len()]; methods.len()];
    for col in 0..tasks.len() {
        let present: Vec<usize> = ranked.iter().copied().filter(|&i| accuracies[i][col].is_some()).collect();
        let keys: Vec<i64> = present.iter().map(|&i| rank_key(accuracies[i][col].unwrap())).collect();
        for (&i, r) in present.iter().zip(competition_ranks(&keys)) {
            ranks[i][col] = Some(r);
        }
    }

    methods
        .iter()
        .enumerate()
        .map(|(i, &method)| {
            let scores: Vec<TaskScore> = tasks
                .iter()
                .enumerate()
                .map(|(col, &(task, in_domain))| TaskScore {
                    task: task.clone(),
                    in_domain,
                    accuracy: accuracies[i][col],
                    rank: ranks[i][col],
                })
                .collect();
            let avg = |want_in: bool, f: &dyn Fn(&TaskScore) -> Option<f64>| {
                let vals: Vec<Option<f64>> = scores.iter().filter(|s| s.in_domain == want_in).map(f).collect();
                if vals.iter().any(Option::is_none) {
                    None
                } else {
                    mean(vals.into_iter().flatten())
                }
            };
            MethodReport {
                method,
                reference: method.is_reference(),
                in_domain_accuracy: avg(true, &|s| s.accuracy),
                in_domain_rank: avg(true, &|s| s.rank.map(|r| r as f64)),
                out_of_domain_accuracy: avg(false, &|s| s.accuracy),
                out_of_domain_rank: avg(false, &|s| s.rank.map(|r| r as f64)),
                scores,
            }
        })
        .collect()
}

fn cost_rows(
    cfg: &Config,
    trained: &TrainedSuite,
    suite: &TaskSuite,
    learned: &[LearnedWeights],
    hierarchy: Option<&HierarchyRun>,
) -> Result<Vec<CostRow>> {
    let n = trained.spec.param_count() as u64;
    let k = trained.task_vectors.len() as u64;
    let train_samples: u64 = suite.in_domain_tasks.iter().map(|t| t.train.len() as u64).sum();
    let val_samples: u64 = suite.in_domain_tasks.iter().map(|t| t.validation.len() as u64).sum();
    let layer_weights = learned
        .first()
        .map(|l| l.weights.trainable_count() as u64)
        .unwrap_or(k * trained.spec.layer_count() as u64);
    let base = CostInput {
        n_para: n,
        n_trainable: n,
        n_task_vector: n,
        k: 1,
        is_merging: false,
        n_samples: train_samples,
        flops: cfg.cost.flops,
    };
    let row = |name: &str, input: CostInput, mode: FlopsMode| -> Result<CostRow> {
        let bytes = peak_memory_bytes(&input)?;
        Ok(CostRow {
            row: name.to_string(),
            parameters: input.n_para,
            trainable: input.n_trainable,
            task_vectors_resident: if input.is_merging { input.k } else { 0 },
            peak_memory_bytes: bytes,
            peak_memory_gb: to_gb(bytes),
            peak_memory_gib: to_gib(bytes),
            samples: input.n_samples,
            flops_per_epoch: flops_per_epoch(&input, mode)?,
        })
    };
    let merging = CostInput {
        k,
        is_merging: true,
        n_samples: val_samples,
        ..base
    };
    let mut rows = vec![
        row("full_fine_tuning", base, FlopsMode::Training)?,
        row("non_gradient_merging", CostInput { n_trainable: 1, ..merging }, FlopsMode::Inference)?,
        row("supermerge", CostInput { n_trainable: layer_weights, ..merging }, FlopsMode::MergeFit)?,
    ];
    if let Some(h) = hierarchy {
        let peak = measure_peak_models(&h.trace, &CostInput { n_trainable: layer_weights, ..merging })?;
        rows.push(row(
            "hierarchical",
            CostInput {
                n_trainable: layer_weights,
                k: peak.resident_task_vectors as u64,
                ..merging
            },
            FlopsMode::MergeFit,
        )?);
    }
    Ok(rows)
}

/// Runs every configured method on a trained suite. Method runs proceed in
/// parallel; `work_dir` holds the model stores of the merge-weight fits
/// and is left empty afterwards.
pub fn run_benchmark(
    suite: &TaskSuite,
    trained: &TrainedSuite,
    cfg: &Config,
    seed: u64,
    work_dir: &Path,
) -> Result<BenchResult> {
    let ctx = Context {
        suite,
        trained,
        cfg,
        seed,
        work_dir,
    };
    let methods = cfg.methods.list.clone();
    let outcomes = methods
        .par_iter()
        .map(|&m| ctx.run(m))
        .collect::<Result<Vec<_>>>()?;

    let in_domain = suite.in_domain_names();
    let out_of_domain: Vec<String> = suite.out_of_domain_tasks.iter().map(|t| t.task_name.clone()).collect();
    let accuracies: Vec<Vec<Option<f64>>> = outcomes.iter().map(|o| o.accuracies.clone()).collect();
    let reports = rank_methods(&methods, &accuracies, &in_domain, &out_of_domain);

    let mut sweeps = Vec::new();
    let mut learned = Vec::new();
    let mut hierarchy = None;
    let mut flat_peak_models = None;
    for o in outcomes {
        debug_assert!(methods.contains(&o.method));
        sweeps.extend(o.sweep);
        learned.extend(o.learned);
        if let Some(trace) = o.flat_trace {
            flat_peak_models = Some(trace.peak_concurrent_models);
        }
        if o.hierarchy.is_some() {
            hierarchy = o.hierarchy;
        }
    }
    let layer_stats = trained
        .task_vectors
        .iter()
        .map(|tv| Ok((tv.source_task().to_string(), layer_stats(tv)?)))
        .collect::<Result<Vec<_>>>()?;
    let cost_rows = cost_rows(cfg, trained, suite, &learned, hierarchy.as_ref())?;

    Ok(BenchResult {
        seed,
        in_domain,
        out_of_domain,
        reports,
        sweeps,
        learned,
        hierarchy,
        flat_peak_models,
        layer_stats,
        cost_rows,
    })
}

/// Generates the suite from `cfg`, trains it and runs the benchmark.
pub fn bench(cfg: &Config, seed: u64, work_dir: &Path) -> Result<(TaskSuite, TrainedSuite, BenchResult)> {
    let suite = generate_suite(&cfg.suite, derive_seed(seed, "suite", &[]))?;
    let trained = train_suite(&suite, cfg, seed)?;
    let result = run_benchmark(&suite, &trained, cfg, seed, work_dir)?;
    Ok((suite, trained, result))
}

/// Test accuracy of each fine-tuned model on its own task.
pub fn fine_tuned_accuracy(suite: &TaskSuite, trained: &TrainedSuite) -> Result<Vec<f64>> {
    suite
        .in_domain_tasks
        .iter()
        .zip(&trained.fine_tuned)
        .map(|(t, ft)| Ok(nn::accuracy(&trained.spec, ft, &t.test)?))
        .collect()
}

/// Test accuracy of the pretrained model on each in-domain task.
pub fn pretrained_accuracy(suite: &TaskSuite, trained: &TrainedSuite) -> Result<Vec<f64>> {
    suite
        .in_domain_tasks
        .iter()
        .map(|t: &DatasetSplit| Ok(nn::accuracy(&trained.spec, &trained.pretrained, &t.test)?))
        .collect()
}
