mod common;

use common::{arf, run_pipeline};

use arf_core::evaluation::Metrics;
use arf_core::io::checkpoint::read_checkpoint;
use arf_core::io::records::{read_index, read_log};
use arf_core::training::Provenance;

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = arf(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    assert_eq!(arf(&[]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = arf(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "benchgen",
        "pretrain",
        "precompute",
        "train",
        "eval",
        "ensemble",
        "gradcheck",
        "report",
    ] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn full_scale_defaults_resolve() {
    let out = arf(&["train", "--paper-defaults", "--print-config"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["learning_rate"], 1e-5);
    assert_eq!(cfg["weight_decay"], 0.1);
    assert_eq!(cfg["batch_size"], 512);
    assert_eq!(cfg["epochs"], 10);
}

#[test]
fn flags_override_full_scale_defaults() {
    let out = arf(&[
        "train",
        "--paper-defaults",
        "--print-config",
        "--losses",
        "cl,ret",
        "--anchor-mode",
        "merge",
        "--retrieval-mode",
        "t2v",
        "--retrieval-k",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["enabled_losses"], serde_json::json!(["cl", "ret"]));
    assert_eq!(cfg["anchor_layout"], "merge");
    assert_eq!(cfg["retrieval_mode"], "t2v");
    assert_eq!(cfg["retrieval_k"], 3);
    assert_eq!(cfg["batch_size"], 512);
}

#[test]
fn invalid_values_exit_one() {
    for args in [
        &["train", "--print-config", "--losses", "cl,bogus"][..],
        &["train", "--print-config", "--retrieval-mode", "x2y"][..],
        &["train", "--print-config", "--retrieval-k", "0"][..],
        &["gradcheck", "--eps", "-1"][..],
    ] {
        let out = arf(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).lines().count() >= 1);
    }
}

#[test]
fn gradcheck_passes_on_shipped_defaults() {
    let out = arf(&["gradcheck", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["max_rel_err"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"finetune": {"learnign_rate": 0.1}}"#).unwrap();
    let out = arf(&[
        "train",
        "--print-config",
        "--config",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learnign_rate"), "{}", stderr(&out));
}

#[test]
fn pipeline_artifacts_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), 3);
    let p = |n: &str| dir.path().join(n);

    let pre = read_checkpoint(&p("pre.json")).unwrap();
    let ft = read_checkpoint(&p("ft.json")).unwrap();
    assert_eq!(pre.provenance, Provenance::Pretrained);
    assert_eq!(ft.provenance, Provenance::Finetuned);
    assert_eq!(
        read_index(&p("index.json")).unwrap().source_checkpoint_id(),
        pre.id()
    );
    assert!(!read_log(&p("train_log.jsonl")).unwrap().is_empty());

    let metrics: Metrics =
        serde_json::from_str(&std::fs::read_to_string(p("metrics.json")).unwrap()).unwrap();
    assert!(metrics.accuracy("id").is_some() && metrics.accuracy("zsl").is_some());

    let curve = std::fs::read_to_string(p("curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines.len(), 12);
    assert!(lines[0].starts_with("alpha,id,"));
    assert!(lines[1].starts_with("0,") && lines[11].starts_with("1,"));

    let out = arf(&[
        "report",
        "--metrics",
        &format!("arf={}", p("metrics.json").display()),
        "--table",
        "ds",
        "--format",
        "csv",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("Method,ID,"));
    assert!(table.lines().nth(1).unwrap().starts_with("arf,"));

    let eval_pre = arf(&[
        "eval",
        "--bundle",
        p("bundle").to_str().unwrap(),
        "--checkpoint",
        p("pre.json").to_str().unwrap(),
        "--splits",
        "zsl",
    ]);
    assert_eq!(eval_pre.status.code(), Some(0));
    let m: Metrics = serde_json::from_slice(&eval_pre.stdout).unwrap();
    assert!(m.accuracy("id").is_none() && m.accuracy("zsl").is_some());

    let no_index = arf(&[
        "train",
        "--bundle",
        p("bundle").to_str().unwrap(),
        "--checkpoint",
        p("pre.json").to_str().unwrap(),
        "--out",
        p("x.json").to_str().unwrap(),
    ]);
    assert_eq!(no_index.status.code(), Some(1));
    assert!(stderr(&no_index).contains("--index"));

    let stale = arf(&[
        "train",
        "--bundle",
        p("bundle").to_str().unwrap(),
        "--checkpoint",
        p("ft.json").to_str().unwrap(),
        "--index",
        p("index.json").to_str().unwrap(),
        "--out",
        p("x.json").to_str().unwrap(),
    ]);
    assert_eq!(stale.status.code(), Some(1), "{}", stderr(&stale));
    assert!(!p("x.json").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path(), 1);
    run_pipeline(b.path(), 1);
    assert_eq!(common::snapshot(a.path()), common::snapshot(b.path()));
}
