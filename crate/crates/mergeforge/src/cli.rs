use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mergeforge_core::cost::{flops_per_epoch, peak_memory_bytes, to_gb, to_gib, CostInput, FlopsMode};
use mergeforge_core::hierarchy::{build_plan_by_similarity, execute, MergePlan};
use mergeforge_core::merge::grid_search_lambda;
use mergeforge_core::rng::derive_seed;
use mergeforge_core::task_vector::compute_named;
use mergeforge_core::{nn, DatasetSplit, FitConfig, ModelSpec, ParameterSet};
use serde_json::json;

use crate::bench::{self, fine_tuned_accuracy, pretrained_accuracy, train_suite};
use crate::checkpoint::{self, write_atomic};
use crate::config::{Config, Method};
use crate::dataset_io::{read_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::export::export_reports;
use crate::store::DirectoryStore;
use crate::suite::generate_suite;

#[derive(Parser, Debug)]
#[command(name = "mergeforge", version, about = "Merge fine-tuned models from a shared pretrained anchor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config; fields it omits keep their shipped defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides one config field, e.g. `--set methods.ties_density=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<Config> {
        Config::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a suite, pretrain and fine-tune one model per task.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge explicit checkpoints with one method.
    Merge(MergeArgs),
    /// Evaluate a checkpoint on task directories.
    Eval {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "data", num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "validation", "test"])]
        split: String,
    },
    /// Run the full benchmark and write the reports.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print peak memory and FLOPs for one configuration.
    Cost(CostArgs),
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub pretrained: PathBuf,
    /// Fine-tuned checkpoints; each file stem names its task.
    #[arg(long = "models", num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// Task directories in model order; their validation sets drive λ
    /// selection and merge-weight fits.
    #[arg(long = "data", num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Fixed λ for the non-gradient methods; grid-searched when absent.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to save learned merge weights.
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, required_unless_present = "calibrate")]
    pub n_para: Option<u64>,
    /// Defaults to `--n-para`.
    #[arg(long)]
    pub n_trainable: Option<u64>,
    /// Defaults to `--n-para`.
    #[arg(long)]
    pub n_task_vector: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub k: u64,
    #[arg(long)]
    pub merging: bool,
    #[arg(long, default_value_t = 0)]
    pub n_samples: u64,
    #[arg(long, value_parser = ["training", "merge_fit", "inference"])]
    pub mode: Option<String>,
    /// Refit the FLOPs coefficients to the config's calibration targets and
    /// print them.
    #[arg(long)]
    pub calibrate: bool,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("values always serialize");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_spec(path: &Path) -> Result<ModelSpec> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn task_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
}

fn train(config: &ConfigArgs, seed: u64, out: &Path, log: &mut dyn Write) -> Result<()> {
    let cfg = config.load()?;
    let suite = generate_suite(&cfg.suite, derive_seed(seed, "suite", &[]))?;
    let trained = train_suite(&suite, &cfg, seed)?;
    create_dir(out)?;
    write_atomic(&out.join("config.json"), cfg.to_json().as_bytes())?;
    write_json(&out.join("spec.json"), &trained.spec)?;
    for task in suite.all_tasks().chain([&suite.pretrain_mixture]) {
        write_dataset(&out.join("data").join(&task.task_name), task)?;
    }
    let ckpt = out.join("checkpoints");
    create_dir(&ckpt)?;
    checkpoint::save_params(&trained.pretrained, &ckpt.join("pretrained.ckpt"))?;
    for ((task, ft), tv) in suite.in_domain_tasks.iter().zip(&trained.fine_tuned).zip(&trained.task_vectors) {
        checkpoint::save_params(ft, &ckpt.join(format!("{}.ckpt", task.task_name)))?;
        checkpoint::save_task_vector(tv, &ckpt.join(format!("{}.tv", task.task_name)))?;
    }
    let ft = fine_tuned_accuracy(&suite, &trained)?;
    let pre = pretrained_accuracy(&suite, &trained)?;
    for ((task, f), p) in suite.in_domain_tasks.iter().zip(ft).zip(pre) {
        writeln!(log, "{}: fine-tuned {:.4}, pretrained {:.4}", task.task_name, f, p).ok();
    }
    Ok(())
}

fn merge(args: &MergeArgs, log: &mut dyn Write) -> Result<()> {
    let cfg = args.config.load()?;
    let method: Method = args.method.parse()?;
    if method.is_reference() {
        return Err(Error::config(format!("`{method}` is a reference row, not a merge")));
    }
    let spec = read_spec(&args.spec)?;
    let pretrained = checkpoint::load_params(&args.pretrained, &spec)?;
    let models = args
        .models
        .iter()
        .map(|p| checkpoint::load_params(p, &spec))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = args.models.iter().map(|p| task_name(p)).collect();
    let data = args
        .data
        .iter()
        .map(|d| read_dataset(d, 0.1, args.seed))
        .collect::<Result<Vec<_>>>()?;
    if !data.is_empty() && data.len() != models.len() {
        return Err(Error::config(format!(
            "{} models but {} task directories",
            models.len(),
            data.len()
        )));
    }
    let validation: Vec<_> = data.iter().map(DatasetSplit::validation_view).collect();
    let need_data = |what: &str| Error::config(format!("`{method}` needs --data to {what}"));

    let merged = if let Some(base) = cfg.methods.baseline(method, derive_seed(args.seed, "dare", &[])) {
        let tvs = models
            .iter()
            .zip(&names)
            .map(|(m, n)| compute_named(m, &pretrained, n))
            .collect::<mergeforge_core::Result<Vec<_>>>()?;
        let lambda = match args.lambda {
            Some(l) => l,
            None => {
                if validation.is_empty() {
                    return Err(need_data("select λ"));
                }
                let sweep = grid_search_lambda(&base, &cfg.methods.lambda_grid, &spec, &pretrained, &tvs, &validation)?;
                sweep.best_lambda
            }
        };
        writeln!(log, "{method}: λ = {lambda}").ok();
        base.merge(&pretrained, &tvs, lambda)?
    } else {
        if validation.is_empty() {
            return Err(need_data("fit merge weights"));
        }
        let plan = match method {
            Method::Hierarchical => match &cfg.hierarchical.plan {
                Some(root) => MergePlan::new(root.clone(), cfg.hierarchical.fan_in_limit, models.len())?,
                None => {
                    let tvs = models
                        .iter()
                        .zip(&names)
                        .map(|(m, n)| compute_named(m, &pretrained, n))
                        .collect::<mergeforge_core::Result<Vec<_>>>()?;
                    build_plan_by_similarity(&tvs, cfg.hierarchical.fan_in_limit)?
                }
            },
            _ => MergePlan::flat(models.len())?,
        };
        let fit = FitConfig {
            use_tanh: method != Method::SupermergeNoTanh && cfg.supermerge.use_tanh,
            seed: derive_seed(args.seed, "supermerge", &[&cfg.supermerge.seed.to_le_bytes()]),
            ..cfg.supermerge
        };
        let store_dir = args.out.with_extension("store");
        let refs: Vec<&ParameterSet> = models.iter().collect();
        let mut store = DirectoryStore::with_models(&store_dir, &spec, &refs)?;
        let run = execute(&spec, &plan, &pretrained, &mut store, &validation, &fit);
        store.remove()?;
        let run = run?;
        writeln!(
            log,
            "{method}: {} node(s), peak resident models {}",
            run.reports.len(),
            run.trace.peak_concurrent_models
        )
        .ok();
        if let Some(path) = &args.weights_out {
            let root = run.reports.last().expect("the root is reported");
            checkpoint::save_weights(&root.weights, &spec, path)?;
        }
        run.merged
    };
    checkpoint::save_params(&merged, &args.out)
}

fn eval(spec: &Path, model: &Path, data: &[PathBuf], split: &str, out: &mut dyn Write) -> Result<()> {
    let spec = read_spec(spec)?;
    let params = checkpoint::load_params(model, &spec)?;
    let mut total = 0.0;
    for dir in data {
        let task = read_dataset(dir, 0.1, 0)?;
        let examples = match split {
            "train" => &task.train,
            "validation" => &task.validation,
            _ => &task.test,
        };
        let acc = nn::accuracy(&spec, &params, examples)?;
        total += acc;
        writeln!(out, "{}", json!({"task": task.task_name, "split": split, "accuracy": acc})).ok();
    }
    writeln!(out, "{}", json!({"mean_accuracy": total / data.len() as f64})).ok();
    Ok(())
}

fn run_bench(config: &ConfigArgs, seed: u64, out: &Path, log: &mut dyn Write) -> Result<()> {
    let cfg = config.load()?;
    let start = Instant::now();
    create_dir(out)?;
    let work = out.join(".work");
    let (_, _, result) = bench::bench(&cfg, seed, &work)?;
    if work.exists() {
        fs::remove_dir_all(&work).map_err(|e| Error::io(&work, e))?;
    }
    let files = export_reports(&result, &cfg, out)?;
    for r in &result.reports {
        if let Some(acc) = r.in_domain_accuracy {
            writeln!(log, "{:<20} in-domain {:.4}", r.method.name(), acc).ok();
        }
    }
    writeln!(
        log,
        "wrote {} files to {} in {:.1}s",
        files.len(),
        out.display(),
        start.elapsed().as_secs_f64()
    )
    .ok();
    Ok(())
}

fn cost(args: &CostArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = args.config.load()?;
    if args.calibrate {
        let c = cfg.cost.recalibrate()?;
        writeln!(out, "{}", serde_json::to_string_pretty(&c).expect("coefficients serialize")).ok();
        return Ok(());
    }
    let n_para = args.n_para.expect("clap requires --n-para");
    let input = CostInput {
        n_para,
        n_trainable: args.n_trainable.unwrap_or(n_para),
        n_task_vector: args.n_task_vector.unwrap_or(n_para),
        k: args.k,
        is_merging: args.merging,
        n_samples: args.n_samples,
        flops: cfg.cost.flops,
    };
    input.validate()?;
    let mode = match args.mode.as_deref() {
        Some("training") => FlopsMode::Training,
        Some("merge_fit") => FlopsMode::MergeFit,
        Some("inference") => FlopsMode::Inference,
        _ if !args.merging => FlopsMode::Training,
        _ if input.n_trainable <= 1 => FlopsMode::Inference,
        _ => FlopsMode::MergeFit,
    };
    let bytes = peak_memory_bytes(&input)?;
    let flops = flops_per_epoch(&input, mode)?;
    writeln!(out, "| Parameters | Trainable | Peak memory | Samples | FLOPs |").ok();
    writeln!(out, "|---|---|---|---|---|").ok();
    writeln!(
        out,
        "| {} | {} | {:.1} GB / {:.1} GiB ({bytes} B) | {} | {:.1e} |",
        input.n_para,
        input.n_trainable,
        to_gb(bytes),
        to_gib(bytes),
        input.n_samples,
        flops
    )
    .ok();
    Ok(())
}

/// Runs a parsed command. Results go to `out`, progress to `log`.
pub fn run(cli: Cli, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out: dir } => train(&config, seed, &dir, log),
        Command::Merge(args) => merge(&args, log),
        Command::Eval {
            spec,
            model,
            data,
            split,
        } => eval(&spec, &model, &data, &split, out),
        Command::Bench { config, seed, out: dir } => run_bench(&config, seed, &dir, log),
        Command::Cost(args) => cost(&args, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_requires_a_seed() {
        let err = Cli::try_parse_from(["mergeforge", "bench", "--out", "x"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(Cli::try_parse_from(["mergeforge", "bench", "--seed", "3", "--out", "x"]).is_ok());
    }

    #[test]
    fn cost_row() {
        let cli = Cli::try_parse_from([
            "mergeforge",
            "cost",
            "--n-para",
            "2850000000",
            "--n-trainable",
            "2112",
            "--k",
            "11",
            "--merging",
            "--n-samples",
            "352",
        ])
        .unwrap();
        let mut out = Vec::new();
        run(cli, &mut out, &mut std::io::sink()).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("136800025344 B"), "{text}");
        assert!(text.contains("127.4 GiB"), "{text}");
    }
}
