use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_racapnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "racapnet {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_train_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("spec.json"),
        r#"{"relations": 3, "sentence_len": 6, "train_bags": 20, "test_bags": 8, "seed": 4}"#,
    )
    .unwrap();
    fs::write(d.join("cfg.json"), r#"{"model": {"max_len": 6, "word_dim": 4, "pos_dim": 2, "hidden": 8, "heads": 2, "ffn_dim": 8, "capsule_dim": 4, "relation_dim": 4}, "epochs": 3, "batch_size": 4, "lr": 0.01, "dropout": 0.0}"#).unwrap();
    let (corpus, run_dir) = (d.join("corpus"), d.join("run"));

    run(&["generate", "--spec", p(&d.join("spec.json")), "--out", p(&corpus)]);
    for f in ["train.txt", "test.txt", "relations.txt"] {
        assert!(corpus.join(f).exists(), "{f}");
    }

    run(&["train", "--config", p(&d.join("cfg.json")), "--data", p(&corpus), "--out", p(&run_dir)]);
    let metrics = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(run_dir.join("config.json").exists());

    let (pr, summary) = (d.join("pr.csv"), d.join("summary.json"));
    run(&[
        "eval", "--model", p(&run_dir.join("model.ckpt")), "--data", p(&corpus), "--p-at", "1,5", "--pr", p(&pr), "--summary", p(&summary),
    ]);
    let csv = fs::read_to_string(&pr).unwrap();
    assert!(csv.starts_with("precision,recall\n"));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    let area = s["area"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&area));
    assert!(s["precision_at"]["P@5"].is_number());

    let dump = d.join("dump");
    run(&["inspect", "--model", p(&run_dir.join("model.ckpt")), "--data", p(&corpus), "--limit", "3", "--out", p(&dump)]);
    assert_eq!(fs::read_to_string(dump.join("routing.jsonl")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_to_string(dump.join("attention.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn gradcheck_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = run(&["gradcheck", "--max-entries", "3", "--report", p(&report)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("threshold"));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["tolerance"].as_f64(), Some(1e-4));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"model": {"heads": 3}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_racapnet"))
        .args(["gradcheck", "--config", p(&cfg)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
