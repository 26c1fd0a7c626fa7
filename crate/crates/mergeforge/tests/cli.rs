use std::path::Path;
use std::process::{Command, Output};

fn mergeforge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mergeforge"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn mean_accuracy(eval: &str) -> f64 {
    let last: serde_json::Value = serde_json::from_str(eval.lines().last().unwrap()).unwrap();
    last["mean_accuracy"].as_f64().unwrap()
}

#[test]
fn train_merge_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let small = ["--set", "suite.in_domain=3", "--set", "suite.out_of_domain=1"];
    let mut args = vec!["train", "--seed", "3", "--out", "run"];
    args.extend(small);
    ok(mergeforge(&args, d));
    for f in ["config.json", "spec.json", "checkpoints/pretrained.ckpt", "checkpoints/task2.tv", "data/heldout0/test.jsonl"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    let models = ["run/checkpoints/task0.ckpt", "run/checkpoints/task1.ckpt", "run/checkpoints/task2.ckpt"];
    let data = ["run/data/task0", "run/data/task1", "run/data/task2"];
    for (method, out) in [("ties", "ties.ckpt"), ("supermerge", "sm.ckpt")] {
        let mut args = vec!["merge", "--method", method, "--spec", "run/spec.json", "--pretrained", "run/checkpoints/pretrained.ckpt", "--out", out, "--models"];
        args.extend(models);
        args.push("--data");
        args.extend(data);
        if method == "supermerge" {
            args.extend(["--weights-out", "w.ckpt"]);
        }
        ok(mergeforge(&args, d));
    }
    assert!(d.join("w.ckpt").exists());

    let eval = |model: &str| {
        let mut args = vec!["eval", "--spec", "run/spec.json", "--model", model, "--data"];
        args.extend(data);
        mean_accuracy(&ok(mergeforge(&args, d)))
    };
    let pre = eval("run/checkpoints/pretrained.ckpt");
    let ties = eval("ties.ckpt");
    let sm = eval("sm.ckpt");
    assert!(ties > pre && sm > pre, "pretrained {pre}, ties {ties}, supermerge {sm}");
}

#[test]
fn bad_input_sets_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = mergeforge(&["bench", "--seed", "1", "--out", "x", "--set", "methods.list=[\"nope\"]"], dir.path());
    assert_eq!(unknown.status.code(), Some(2));
    let missing = mergeforge(&["eval", "--spec", "none.json", "--model", "none.ckpt", "--data", "none"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn cost_prints_the_pairwise_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(mergeforge(
        &["cost", "--n-para", "2850000000", "--n-trainable", "2112", "--k", "2", "--merging", "--n-samples", "352"],
        dir.path(),
    ));
    assert!(out.contains("34200025344 B"), "{out}");
}
