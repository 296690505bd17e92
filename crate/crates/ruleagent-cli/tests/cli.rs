//! End-to-end checks of the `ruleagent` binary: exit codes, artifacts, and
//! flag handling.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/fixture_20users.tsv")
}

fn ruleagent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ruleagent"))
        .args(args)
        .env_remove("RULEAGENT_API_KEY")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, output_dir: &Path) -> PathBuf {
    let config = serde_json::json!({
        "dataset": { "kind": "file", "path": fixture_path() },
        "output_dir": output_dir,
        "split_seed": 3,
        "noise_rate": 0.2,
        "noise_seed": 9,
        "train": {
            "epochs": 30,
            "batch_size": 64,
            "learning_rate": 0.005,
            "alpha": 0.05,
            "seed": 11,
            "trace_every": 10,
            "trace_seed": 11
        },
        "agent": {
            "max_actions": 5,
            "eraser_epochs": 10,
            "embedding_dim": 8,
            "seed": 21,
            "eval_ks": [5, 10, 20]
        },
        "backend": { "kind": "scripted" }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn run_agent_happy_path_produces_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_config(dir.path(), &out_dir);
    let output = ruleagent(&["run-agent", "--config", config.to_str().unwrap()]);
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    for artifact in [
        "report.json",
        "rules.txt",
        "confidence.jsonl",
        "actions.jsonl",
        "transcript.jsonl",
        "config.json",
        "params.json",
        "trace.csv",
        "noise_ledger.json",
    ] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["completed"], serde_json::Value::Bool(true));
    assert_eq!(report["planned_actions"], serde_json::json!(5));
}

#[test]
fn run_agent_with_http_backend_and_no_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_config(dir.path(), &out_dir);
    let output = ruleagent(&[
        "run-agent",
        "--config",
        config.to_str().unwrap(),
        "--backend",
        "http",
        "--base-url",
        "http://localhost:1",
    ]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("RULEAGENT_API_KEY"),
        "stderr should name the missing credential: {stderr}"
    );
}

#[test]
fn every_subcommand_documents_itself() {
    for subcommand in [
        "ingest",
        "split",
        "inject-noise",
        "train",
        "run-agent",
        "eval",
        "export-rules",
        "compile-rules",
        "compare-unlearning",
        "report",
    ] {
        let output = ruleagent(&[subcommand, "--help"]);
        assert_eq!(output.status.code(), Some(0), "{subcommand} --help failed");
        let text = String::from_utf8_lossy(&output.stdout);
        assert!(text.contains("--config") || text.contains("--run-dir"));
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let output = ruleagent(&["frobnicate"]);
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn split_writes_partition_files_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("splits");
    let fixture = fixture_path();
    let args = [
        "split",
        "--dataset",
        fixture.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--split-seed",
        "5",
    ];
    assert!(ruleagent(&args).status.success());
    let first = fs::read_to_string(out_dir.join("train.tsv")).unwrap();
    assert!(ruleagent(&args).status.success());
    let second = fs::read_to_string(out_dir.join("train.tsv")).unwrap();
    assert_eq!(first, second);
    assert!(out_dir.join("valid.tsv").exists());
    assert!(out_dir.join("test.tsv").exists());
    assert!(out_dir.join("train.tsv.meta.json").exists());
}

#[test]
fn train_then_compile_rules_reapplies_filter() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_config(dir.path(), &out_dir);

    let output = ruleagent(&["train", "--config", config.to_str().unwrap()]);
    assert!(
        output.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let trace = out_dir.join("trace.csv");
    assert!(trace.exists());

    let rules = dir.path().join("rules.txt");
    fs::write(
        &rules,
        "Rule-1(Value Threshold): The noisy sample's loss value exceeds the 90th percentile threshold.\n",
    )
    .unwrap();

    let output = ruleagent(&[
        "compile-rules",
        "--config",
        config.to_str().unwrap(),
        "--rules",
        rules.to_str().unwrap(),
        "--traces",
        trace.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "compile-rules failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("compile_report.json")).unwrap())
            .unwrap();
    let flagged = report["flagged"].as_u64().unwrap();
    assert!(
        flagged > 0,
        "the 90th-percentile rule should flag something"
    );
    assert!(report["test"]["recall@10"].is_number());
    assert_eq!(
        report["train_size_before"].as_u64().unwrap(),
        report["train_size_after"].as_u64().unwrap() + flagged
    );
}

#[test]
fn export_rules_prints_or_writes_rules() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_config(dir.path(), &out_dir);
    assert!(
        ruleagent(&["run-agent", "--config", config.to_str().unwrap()])
            .status
            .success()
    );

    let exported = dir.path().join("exported_rules.txt");
    let output = ruleagent(&[
        "export-rules",
        "--run-dir",
        out_dir.to_str().unwrap(),
        "--out",
        exported.to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let text = fs::read_to_string(&exported).unwrap();
    assert!(text.contains("Rule-1("));
    assert_eq!(text, fs::read_to_string(out_dir.join("rules.txt")).unwrap());

    let report_out = ruleagent(&["report", "--run-dir", out_dir.to_str().unwrap()]);
    assert!(report_out.status.success());
    let text = String::from_utf8_lossy(&report_out.stdout);
    assert!(text.contains("planned actions"));
    assert!(text.contains("Final rules"));
}

#[test]
fn eval_reads_back_persisted_params() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_config(dir.path(), &out_dir);
    assert!(ruleagent(&["train", "--config", config.to_str().unwrap()])
        .status
        .success());
    let output = ruleagent(&["eval", "--config", config.to_str().unwrap()]);
    assert!(
        output.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let parsed: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("eval prints JSON");
    assert!(parsed["test"]["recall@20"].is_number());
}
