//! Report files. Every writer formats numbers explicitly so a rerun with
//! the same seed reproduces the files byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mergeforge_core::hierarchy::path_label;
use mergeforge_core::merge::LambdaSweep;
use serde_json::json;

use crate::bench::{BenchResult, CostRow, LearnedWeights, MethodReport};
use crate::checkpoint::write_atomic;
use crate::config::Config;
use crate::error::{Error, Result};

const HEADER: &str = "Out-of-domain tasks share the input space and class count of the merged tasks, \
so every model is evaluated with the same classification head. Ranks cover the merging methods \
only; equal accuracies at four decimals share the better rank (competition ranking). \
Reference rows are not ranked.";

/// `"1 (95.6)"` for a ranked cell, `"95.6"` for a reference cell, `"-"`
/// when there is no score.
pub fn cell(rank: Option<usize>, accuracy: Option<f64>) -> String {
    match (rank, accuracy) {
        (Some(r), Some(a)) => format!("{r} ({:.1})", 100.0 * a),
        (None, Some(a)) => format!("{:.1}", 100.0 * a),
        _ => "-".to_string(),
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(String::new, |v| format!("{v:.digits$}"))
}

fn markdown_block(out: &mut String, title: &str, tasks: &[String], reports: &[MethodReport], in_domain: bool) {
    if tasks.is_empty() {
        return;
    }
    writeln!(out, "## {title}\n").unwrap();
    write!(out, "| Method |").unwrap();
    for t in tasks {
        write!(out, " {t} |").unwrap();
    }
    writeln!(out, " Avg. rank | Avg. acc |").unwrap();
    writeln!(out, "|---|{}---|---|", "---|".repeat(tasks.len())).unwrap();
    // reference rows first, as in the usual layout
    let ordered = reports
        .iter()
        .filter(|r| r.reference)
        .chain(reports.iter().filter(|r| !r.reference));
    for r in ordered {
        write!(out, "| {} |", r.method).unwrap();
        for s in r.scores.iter().filter(|s| s.in_domain == in_domain) {
            write!(out, " {} |", cell(s.rank, s.accuracy)).unwrap();
        }
        let (rank, acc) = if in_domain {
            (r.in_domain_rank, r.in_domain_accuracy)
        } else {
            (r.out_of_domain_rank, r.out_of_domain_accuracy)
        };
        let rank = rank.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let acc = acc.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v));
        writeln!(out, " {rank} | {acc} |").unwrap();
    }
    out.push('\n');
}

pub fn methods_markdown(result: &BenchResult) -> String {
    let mut out = String::new();
    writeln!(out, "# Merging benchmark (seed {})\n", result.seed).unwrap();
    writeln!(out, "{HEADER}\n").unwrap();
    writeln!(out, "Cells read `rank (accuracy %)`.\n").unwrap();
    markdown_block(&mut out, "In-domain", &result.in_domain, &result.reports, true);
    markdown_block(&mut out, "Out-of-domain", &result.out_of_domain, &result.reports, false);
    if !result.sweeps.is_empty() {
        writeln!(out, "## Selected λ\n").unwrap();
        for s in &result.sweeps {
            writeln!(out, "- {}: {}", s.method, s.best_lambda).unwrap();
        }
        out.push('\n');
    }
    if let Some(h) = &result.hierarchy {
        writeln!(out, "## Resident models\n").unwrap();
        if let Some(flat) = result.flat_peak_models {
            writeln!(out, "- flat: {flat}").unwrap();
        }
        writeln!(
            out,
            "- hierarchical (fan-in {}): {}",
            h.trace.max_fan_in, h.trace.peak_concurrent_models
        )
        .unwrap();
        out.push('\n');
    }
    out
}

pub fn methods_csv(result: &BenchResult) -> String {
    let mut out = String::from("method,reference");
    for t in result.in_domain.iter().chain(&result.out_of_domain) {
        write!(out, ",{t}_accuracy,{t}_rank").unwrap();
    }
    out.push_str(",in_domain_accuracy,in_domain_rank,out_of_domain_accuracy,out_of_domain_rank\n");
    for r in &result.reports {
        write!(out, "{},{}", r.method, r.reference).unwrap();
        for s in &r.scores {
            let rank = s.rank.map_or_else(String::new, |r| r.to_string());
            write!(out, ",{},{rank}", opt(s.accuracy, 6)).unwrap();
        }
        writeln!(
            out,
            ",{},{},{},{}",
            opt(r.in_domain_accuracy, 6),
            opt(r.in_domain_rank, 4),
            opt(r.out_of_domain_accuracy, 6),
            opt(r.out_of_domain_rank, 4)
        )
        .unwrap();
    }
    out
}

pub fn sweep_csv(sweep: &LambdaSweep) -> String {
    let mut out = String::from("lambda,mean_accuracy");
    if let Some(first) = sweep.points.first() {
        for (task, _) in &first.per_task {
            write!(out, ",{task}").unwrap();
        }
    }
    out.push('\n');
    for p in &sweep.points {
        write!(out, "{},{:.6}", p.lambda, p.mean_accuracy).unwrap();
        for (_, acc) in &p.per_task {
            write!(out, ",{acc:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn layer_stats_csv(result: &BenchResult) -> String {
    let mut out = String::from("task,layer,count,mean,std,min,q1,median,q3,max\n");
    for (task, stats) in &result.layer_stats {
        for s in stats {
            writeln!(
                out,
                "{task},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                s.layer, s.count, s.mean, s.std, s.min, s.q1, s.median, s.q3, s.max
            )
            .unwrap();
        }
    }
    out
}

/// `k` rows (models) by `n` columns (layers) of effective coefficients.
pub fn weights_csv(learned: &LearnedWeights) -> String {
    let w = &learned.weights;
    let mut out = String::from("model");
    for name in w.layer_names() {
        write!(out, ",{name}").unwrap();
    }
    out.push('\n');
    let eff = w.effective(learned.use_tanh);
    for (i, id) in w.model_ids().iter().enumerate() {
        out.push_str(id);
        for v in &eff[i * w.n()..(i + 1) * w.n()] {
            write!(out, ",{v:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn cost_csv(rows: &[CostRow]) -> String {
    let mut out = String::from(
        "row,parameters,trainable,task_vectors_resident,peak_memory_bytes,peak_memory_gb,peak_memory_gib,samples,flops_per_epoch\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{},{:.4e}",
            r.row,
            r.parameters,
            r.trainable,
            r.task_vectors_resident,
            r.peak_memory_bytes,
            r.peak_memory_gb,
            r.peak_memory_gib,
            r.samples,
            r.flops_per_epoch
        )
        .unwrap();
    }
    out
}

pub fn summary_json(result: &BenchResult, cfg: &Config) -> String {
    let hierarchy = result.hierarchy.as_ref().map(|h| {
        json!({
            "plan": h.plan.root(),
            "fan_in_limit": h.plan.fan_in_limit(),
            "depth": h.plan.depth(),
            "peak_concurrent_models": h.trace.peak_concurrent_models,
            "max_fan_in": h.trace.max_fan_in,
            "trace": h.trace.entries,
            "nodes": h.nodes.iter().map(|n| json!({
                "path": path_label(&n.path),
                "covered_tasks": n.covered_tasks,
                "tasks_read": n.tasks_read,
                "seed": n.seed,
                "epochs": n.epochs,
                "final_loss": n.final_loss,
                "model_ids": n.weights.model_ids(),
                "layers": n.weights.layer_names(),
                "weights": n.weights.values(),
            })).collect::<Vec<_>>(),
        })
    });
    let value = json!({
        "seed": result.seed,
        "in_domain": result.in_domain,
        "out_of_domain": result.out_of_domain,
        "reports": result.reports,
        "best_lambda": result.sweeps.iter().map(|s| (s.method.clone(), s.best_lambda)).collect::<std::collections::BTreeMap<_, _>>(),
        "flat_peak_concurrent_models": result.flat_peak_models,
        "hierarchy": hierarchy,
        "cost": result.cost_rows,
        "config": cfg,
    });
    let mut s = serde_json::to_string_pretty(&value).expect("summary always serializes");
    s.push('\n');
    s
}

/// Writes every report into `out_dir` and returns the paths in write order.
pub fn export_reports(result: &BenchResult, cfg: &Config, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files: Vec<(String, String)> = vec![
        ("methods.md".into(), methods_markdown(result)),
        ("methods.csv".into(), methods_csv(result)),
        ("layer_stats.csv".into(), layer_stats_csv(result)),
        ("cost.csv".into(), cost_csv(&result.cost_rows)),
    ];
    for s in &result.sweeps {
        files.push((format!("lambda_sweep_{}.csv", s.method), sweep_csv(s)));
    }
    for l in &result.learned {
        files.push((format!("merge_weights_{}.csv", l.method), weights_csv(l)));
    }
    files.push(("summary.json".into(), summary_json(result, cfg)));

    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = out_dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mergeforge_core::merge::LambdaPoint;
    use mergeforge_core::MergeWeights;

    #[test]
    fn cell_format() {
        assert_eq!(cell(Some(1), Some(0.956)), "1 (95.6)");
        assert_eq!(cell(None, Some(0.5)), "50.0");
        assert_eq!(cell(None, None), "-");
    }

    #[test]
    fn sweep_rows_match_grid() {
        let sweep = LambdaSweep {
            method: "ties".into(),
            best_lambda: 0.2,
            points: [0.1, 0.2, 0.3]
                .iter()
                .map(|&lambda| LambdaPoint {
                    lambda,
                    mean_accuracy: lambda,
                    per_task: vec![("a".into(), lambda)],
                })
                .collect(),
        };
        let csv = sweep_csv(&sweep);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap(), "lambda,mean_accuracy,a");
        assert_eq!(csv.lines().nth(1).unwrap(), "0.1,0.100000,0.100000");
    }

    #[test]
    fn weights_heatmap_shape() {
        let w = MergeWeights::filled(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["l0".into(), "l1".into()],
            0.0,
        )
        .unwrap();
        let csv = weights_csv(&LearnedWeights {
            method: crate::config::Method::Supermerge,
            weights: w,
            use_tanh: true,
        });
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "model,l0,l1");
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));
    }
}
