//! Helpers shared by the binary-level test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn ipat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipat")).args(args).output().expect("run ipat")
}

pub fn ok(args: &[&str]) -> String {
    let out = ipat(args);
    assert!(out.status.success(), "ipat {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

pub fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not JSON ({e}): {last}"))
}

/// Generates a corpus and rewrites its config with `edit`.
pub fn corpus(dir: &Path, high: usize, low: usize, edit: impl FnOnce(&mut toml::Table)) -> PathBuf {
    let d = dir.to_str().unwrap();
    ok(&["synth", "--out", d, "--seed", "3", "--high", &high.to_string(), "--low", &low.to_string()]);
    let path = dir.join("experiment.toml");
    let mut t: toml::Table = std::fs::read_to_string(&path).unwrap().parse().unwrap();
    edit(&mut t);
    std::fs::write(&path, toml::to_string(&t).unwrap()).unwrap();
    path
}

pub fn set(t: &mut toml::Table, section: &str, key: &str, v: impl Into<toml::Value>) {
    let s = t.entry(section).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    s.as_table_mut().unwrap().insert(key.into(), v.into());
}

/// Tiny model and few epochs, for tests that only exercise plumbing.
pub fn shrink(t: &mut toml::Table) {
    set(t, "arch", "d_model", 32);
    set(t, "arch", "d_ff", 64);
    set(t, "arch", "enc_layers", 1);
    set(t, "arch", "dec_layers", 1);
    set(t, "pretrain", "epochs", 2);
    set(t, "pretrain", "average_last", 2);
    set(t, "finetune", "epochs", 3);
    set(t, "finetune", "average_last", 2);
    set(t, "decode", "beam", 2);
    set(t, "embed", "n_per_lang", 40);
}

/// prepare → g2p → train-ipa → adapt → bpe-train → finetune → decode for `xc`.
pub fn pipeline(cfg: &Path) {
    let c = cfg.to_str().unwrap();
    ok(&["prepare", "--config", c]);
    ok(&["g2p", "--config", c]);
    ok(&["train-ipa", "--config", c]);
    ok(&["adapt", "--config", c, "--lang", "xc"]);
    ok(&["bpe-train", "--config", c, "--lang", "xc"]);
    ok(&["finetune", "--config", c, "--lang", "xc"]);
    ok(&["decode", "--config", c, "--stage", "finetune-xc"]);
}

/// Scores `stage`'s test hypotheses for `xc`, writing `report.json`.
pub fn score_stage(run: &Path, stage: &str) -> serde_json::Value {
    let dir = run.join(stage);
    let report = dir.join("report.json");
    let line = ok(&[
        "score",
        "--ref",
        dir.join("refs-xc-test.jsonl").to_str().unwrap(),
        "--hyp",
        dir.join("hyps-xc-test.jsonl").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    serde_json::from_str(line.trim()).unwrap()
}

pub fn metrics(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}
