use std::path::Path;
use std::process::{Command, Output};

use revknn_core::reviser::{ReviserDims, ReviserParams};
use revknn_core::ReviserTrainConfig;

const TINY: &str = r#"{
  "seed": 5,
  "generator": {"source_vocab": 24, "lexicon_size": 24, "upstream_sentences": 60,
                "downstream_train": 30, "downstream_dev": 10, "downstream_test": 6},
  "model": {"emb_dim": 8, "repr_dim": 16},
  "upstream_training": {"epochs": 2},
  "finetune": {"epochs": 2},
  "reviser": {"epochs": 3}
}"#;

fn revknn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revknn"))
        .current_dir(dir)
        .env("REVKNN_THREADS", "1")
        .args(args)
        .output()
        .expect("spawn revknn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = revknn(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), TINY).unwrap();
    dir
}

#[test]
fn unknown_subcommand_and_bad_flags_are_usage_errors() {
    let dir = tiny_dir();
    assert_eq!(revknn(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(revknn(dir.path(), &["build-datastore", "--model"]).status.code(), Some(1));
    let o = revknn(dir.path(), &["--config", "cfg.json", "translate", "--model", "m", "--datastore", "d", "--data", "x", "--lambda", "2"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert_eq!(revknn(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_model_is_a_data_error_naming_the_file() {
    let dir = tiny_dir();
    ok(dir.path(), &["--config", "cfg.json", "gen-data", "--out", "data"]);
    let o = revknn(dir.path(), &["build-datastore", "--model", "missing.bin", "--data", "data/train.jsonl", "--out", "ds.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.bin"), "{}", stderr(&o));
}

#[test]
fn staged_pipeline_and_dimension_mismatch() {
    let dir = tiny_dir();
    let d = dir.path();
    let c = ["--config", "cfg.json"];
    let run = |args: &[&str]| ok(d, &[&c[..], args].concat());
    run(&["gen-data", "--out", "data"]);
    run(&["train-model", "--data", "data/upstream.jsonl", "--vocab", "data/vocab.json", "--out", "up.bin"]);
    run(&["finetune-model", "--model", "up.bin", "--data", "data/train.jsonl", "--out", "down.bin"]);
    run(&["build-datastore", "--model", "up.bin", "--data", "data/train.jsonl", "--out", "up_ds.bin"]);
    run(&["build-datastore", "--model", "down.bin", "--data", "data/train.jsonl", "--out", "down_ds.bin"]);
    let pair = ["--upstream-model", "up.bin", "--downstream-model", "down.bin", "--upstream-ds", "up_ds.bin", "--downstream-ds", "down_ds.bin"];
    run(&[&["collect-pairs", "--data", "data/train.jsonl", "--out", "records.jsonl"][..], &pair].concat());
    run(&["train-reviser", "--records", "records.jsonl", "--out", "reviser.bin"]);
    run(&[&["revise-datastore", "--reviser", "reviser.bin", "--out", "rev_ds.bin"][..], &pair].concat());
    assert!(d.join("rev_ds.bin.meta.json").exists());

    let eval = ["--model", "up.bin", "--datastore", "rev_ds.bin", "--data", "data/dev.jsonl"];
    let o = run(&[&["eval-retrieval"][..], &eval].concat());
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["retrieval_accuracy"].as_f64().unwrap() <= 1.0);
    assert_eq!(report["config"]["revised"], true);
    let o = run(&[&["eval-translate"][..], &eval].concat());
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["token_accuracy"].is_number());
    let o = run(&[&["translate", "--lambda", "0"][..], &eval].concat());
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 10);
    let o = run(&["domain-diff", "data/upstream.jsonl", "data/train.jsonl"]);
    let diff: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&diff));

    // A reviser for 16-dim keys against the 32-dim datastores of a default-sized model.
    let small = ReviserParams::init(ReviserDims { repr_dim: 16, emb_dim: 16, hidden: 8 }, 3).unwrap();
    small.save(&ReviserTrainConfig::default(), &d.join("small_reviser.bin")).unwrap();
    let big = ["--seed", "9"];
    ok(d, &[&big[..], &["gen-data", "--out", "big", "--upstream-sentences", "40", "--downstream-train", "20"]].concat());
    ok(d, &[&big[..], &["train-model", "--data", "big/train.jsonl", "--vocab", "big/vocab.json", "--out", "big_up.bin", "--epochs", "1"]].concat());
    ok(d, &[&big[..], &["build-datastore", "--model", "big_up.bin", "--data", "big/train.jsonl", "--out", "big_ds.bin"]].concat());
    let o = revknn(
        d,
        &[
            "revise-datastore", "--reviser", "small_reviser.bin", "--out", "bad.bin",
            "--upstream-model", "big_up.bin", "--downstream-model", "big_up.bin",
            "--upstream-ds", "big_ds.bin", "--downstream-ds", "big_ds.bin",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("inconsistent dimensions"), "{}", stderr(&o));
}

#[test]
fn run_experiment_then_report_is_stable() {
    let dir = tiny_dir();
    let d = dir.path();
    let o = ok(d, &["--config", "cfg.json", "run-experiment", "--out", "run"]);
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(table.contains("vanilla") && table.contains("revised") && table.contains("delta"));
    let first = std::fs::read(d.join("run/report.json")).unwrap();
    let again = ok(d, &["report", "run"]);
    assert_eq!(String::from_utf8_lossy(&again.stdout), table);
    assert_eq!(std::fs::read(d.join("run/report.json")).unwrap(), first);

    std::fs::remove_file(d.join("run/eval_revised.json")).unwrap();
    let o = revknn(d, &["report", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eval_revised.json"), "{}", stderr(&o));
}

#[test]
fn provenance_mismatch_warns_but_succeeds() {
    let dir = tiny_dir();
    let d = dir.path();
    ok(d, &["--config", "cfg.json", "gen-data", "--out", "data"]);
    let o = ok(d, &["--config", "cfg.json", "--seed", "77", "domain-diff", "data/upstream.jsonl", "data/train.jsonl"]);
    assert!(stderr(&o).contains("current config"), "{}", stderr(&o));
    let o = ok(d, &["--config", "cfg.json", "domain-diff", "data/upstream.jsonl", "data/train.jsonl"]);
    assert!(!stderr(&o).contains("current config"), "{}", stderr(&o));
}
