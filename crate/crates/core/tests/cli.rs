//! End-to-end runs of the `exit-rl` binary.

use std::path::Path;
use std::process::{Command, Output};

use exit_core::harness::io::METRIC_HEADER;

const TINY: &str = r#"
[env]
kind = "multi_turn_key_sequence"
turns = 3
vocab = 4
feature_buckets = 16
train_tasks = 8

[grpo]
group_size = 4
prompts_per_batch = 2

[exit]
capacity = 16
min_size = 4

[harness]
iterations = ITER
eval_tasks = 6
eval_samples = 2
log_embeddings = true
"#;

fn exe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exit-rl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, iterations: u64) -> String {
    let path = dir.join(name);
    std::fs::write(&path, TINY.replace("ITER", &iterations.to_string())).unwrap();
    path.to_str().unwrap().to_string()
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn train_eval_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", 12);
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();
    let out = exe(&["train", "--config", &cfg, "--seed", "3", "--out", run_s]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(METRIC_HEADER));
    assert_eq!(lines.count(), 12);
    let rollouts = std::fs::read_to_string(run.join("rollouts.jsonl")).unwrap();
    assert_eq!(rollouts.lines().count(), 12 * 2 * 4);
    for line in rollouts.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["embedding"].is_array());
    }

    let ck = run.join("checkpoint.json");
    let report = json(&exe(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--k",
        "2",
        "--n",
        "2",
    ]));
    assert_eq!(report["k"], 2);
    assert_eq!(report["accuracy"].as_array().unwrap().len(), 3);
    assert_eq!(report["tasks"], 6);

    let tasks = tmp.path().join("tasks.json");
    std::fs::write(
        &tasks,
        r#"[{"task_id": 77, "seed": 1, "params": {"kind": "multi_turn_key_sequence", "turns": 3, "vocab": 4, "feature_buckets": 16}}]"#,
    )
    .unwrap();
    let out = exe(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--k",
        "1",
        "--tasks",
        tasks.to_str().unwrap(),
    ]);
    assert_eq!(json(&out)["tasks"], 1);

    let both = json(&exe(&["report", "--run", run_s]));
    assert!(both["curriculum"]["series"].is_array());
    assert!(both["diversity"]["distinct_starts"].as_u64().unwrap() >= 1);
    let cur = json(&exe(&["report", "--run", run_s, "--kind", "curriculum"]));
    assert!(cur.get("diversity").is_none());
}

#[test]
fn resumed_cli_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let short = write_config(tmp.path(), "short.toml", 8);
    let long = write_config(tmp.path(), "long.toml", 16);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(exe(&["train", "--config", &long, "--out", a.to_str().unwrap()])
        .status
        .success());
    assert!(exe(&["train", "--config", &short, "--out", b.to_str().unwrap()])
        .status
        .success());
    let ck = b.join("checkpoint.json");
    let out = exe(&[
        "train",
        "--config",
        &long,
        "--out",
        b.to_str().unwrap(),
        "--resume",
        ck.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "grpo.csv", "rollouts.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }

    // A different seed is not a resume of the same run.
    let out = exe(&[
        "train",
        "--config",
        &long,
        "--seed",
        "9",
        "--out",
        b.to_str().unwrap(),
        "--resume",
        ck.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(
        &path,
        TINY.replace("ITER", "2")
            .replace("[grpo]", "[grpo]\nlearning_rat = 0.1"),
    )
    .unwrap();
    let out = exe(&["train", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let out = exe(&[
        "eval",
        "--checkpoint",
        tmp.path().join("missing.json").to_str().unwrap(),
        "--k",
        "1",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
