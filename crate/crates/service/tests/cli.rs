use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn docstruct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docstruct"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = docstruct(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn clean_proposals_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "synth",
        "--count",
        "8",
        "--seed",
        "3",
        "--out",
        &p(d, "t.jsonl"),
    ]);
    ok(&[
        "simulate",
        "--input",
        &p(d, "t.jsonl"),
        "--seed",
        "1",
        "--out",
        &p(d, "s.jsonl"),
    ]);
    ok(&[
        "structure",
        "--input",
        &p(d, "s.jsonl"),
        "--out",
        &p(d, "l.jsonl"),
    ]);
    let report: Value = serde_json::from_str(&ok(&[
        "eval",
        "--truth",
        &p(d, "t.jsonl"),
        "--pred",
        &p(d, "l.jsonl"),
    ]))
    .unwrap();
    assert_eq!(report["pages"], 8);
    assert_eq!(report["micro"]["f1"], 1.0);
    assert_eq!(report["micro"]["fp"], 0);
    assert_eq!(
        std::fs::read_to_string(d.join("l.jsonl"))
            .unwrap()
            .lines()
            .count(),
        8
    );
}

#[test]
fn fragmented_proposals_need_combination() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "synth",
        "--count",
        "20",
        "--seed",
        "8",
        "--out",
        &p(d, "t.jsonl"),
    ]);
    ok(&[
        "simulate",
        "--input",
        &p(d, "t.jsonl"),
        "--seed",
        "2",
        "--fragmentation",
        "0.6",
        "--out",
        &p(d, "s.jsonl"),
    ]);
    ok(&[
        "structure",
        "--input",
        &p(d, "s.jsonl"),
        "--out",
        &p(d, "full.jsonl"),
    ]);
    ok(&[
        "structure",
        "--input",
        &p(d, "s.jsonl"),
        "--no-combine",
        "--out",
        &p(d, "nms.jsonl"),
    ]);
    let f1 = |pred: &str| -> f64 {
        let r: Value = serde_json::from_str(&ok(&[
            "eval",
            "--truth",
            &p(d, "t.jsonl"),
            "--pred",
            &p(d, pred),
        ]))
        .unwrap();
        r["per_class"]["cell"]["f1"].as_f64().unwrap()
    };
    assert!(f1("full.jsonl") > f1("nms.jsonl") + 0.1);
}

#[test]
fn stdin_and_stdout_pipe_through() {
    let dir = tempfile::tempdir().unwrap();
    let truth = ok(&["synth", "--count", "2", "--seed", "4"]);
    std::fs::write(dir.path().join("t.jsonl"), &truth).unwrap();
    let sets = ok(&[
        "simulate",
        "--input",
        &p(dir.path(), "t.jsonl"),
        "--seed",
        "0",
    ]);
    assert_eq!(sets.lines().count(), 2);
    let mut child = Command::new(env!("CARGO_BIN_EXE_docstruct"))
        .args(["structure"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write;
    child
        .stdin
        .take()
        .unwrap()
        .write_all(sets.as_bytes())
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
}

#[test]
fn bad_input_fails_with_a_located_message() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.jsonl"),
        "{\"page_id\":\"x\",\"regions\":[]}\nnot json\n",
    )
    .unwrap();
    let out = docstruct(&["structure", "--input", &p(dir.path(), "bad.jsonl")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert!(!docstruct(&["synth", "--count", "-1"]).status.success());
}

#[test]
fn train_incr_reports_errors_and_histories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"task": {"dim": 8, "old_classes": 3, "train_per_class": 40, "test_per_class": 40},
                  "hidden": [16], "base": {"max_steps": 300, "learning_rate": 0.01, "margin": 1},
                  "update": {"max_steps": 300, "learning_rate": 0.01, "margin": 1, "new_data_rate": 0.25, "alpha": 1.0}}"#;
    std::fs::write(dir.path().join("exp.json"), cfg).unwrap();
    let run = || -> Value {
        serde_json::from_str(&ok(&[
            "train-incr",
            "--seed",
            "3",
            "--config",
            &p(dir.path(), "exp.json"),
            "--alpha",
            "0.5",
        ]))
        .unwrap()
    };
    let a = run();
    assert_eq!(a["settings"]["update"]["alpha"], 0.5);
    assert_eq!(a["settings"]["task"]["seed"], 3);
    for key in [
        "base_old_error",
        "fine_tune_old_error",
        "incremental_old_error",
        "incremental_new_error",
    ] {
        let e = a["report"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&e), "{key} = {e}");
    }
    assert!(a["report"]["incremental_training"]["history"]
        .as_array()
        .is_some());
    assert_eq!(run(), a);
}
