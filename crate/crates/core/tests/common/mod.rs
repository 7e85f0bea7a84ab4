#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn arf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arf"))
        .args(args)
        .output()
        .expect("arf binary runs")
}

fn must(args: &[&str]) {
    let out = arf(args);
    assert!(
        out.status.success(),
        "arf {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

/// benchgen → pretrain → precompute → train → eval → ensemble inside `dir`.
pub fn run_pipeline(dir: &Path, seed: u64) {
    let p = |n: &str| dir.join(n).to_str().unwrap().to_string();
    let seed = seed.to_string();
    let (bundle, pre, index, ft) = (p("bundle"), p("pre.json"), p("index.json"), p("ft.json"));
    must(&["benchgen", "--out", &bundle, "--seed", &seed]);
    must(&[
        "pretrain",
        "--bundle",
        &bundle,
        "--out",
        &pre,
        "--log",
        &p("pretrain_log.jsonl"),
    ]);
    must(&[
        "precompute",
        "--bundle",
        &bundle,
        "--checkpoint",
        &pre,
        "--out",
        &index,
    ]);
    must(&[
        "train",
        "--bundle",
        &bundle,
        "--checkpoint",
        &pre,
        "--index",
        &index,
        "--out",
        &ft,
        "--log",
        &p("train_log.jsonl"),
    ]);
    must(&[
        "eval",
        "--bundle",
        &bundle,
        "--checkpoint",
        &ft,
        "--out",
        &p("metrics.json"),
    ]);
    must(&[
        "ensemble",
        "--bundle",
        &bundle,
        "--pretrained",
        &pre,
        "--finetuned",
        &ft,
        "--out",
        &p("curve.csv"),
    ]);
}

/// Every regular file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
