//! End-to-end runs of the `dcran` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dcran(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcran")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dcran(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, n: &str) {
    ok(&["gen-data", "--out", path(dir), "--n", n, "--seed", "3", "--contrastive", "0.6"]);
}

const SMALL: [&str; 8] = ["--set", "model.d_h=16", "--set", "model.ffn_dim=32", "--set", "model.n_enc_layers=1", "--set", "model.n_dec_layers=1"];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Vec<serde_json::Value> {
    let mut args = vec!["train", "--data", path(data), "--out", path(out)];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args);
    fs::read_to_string(out.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_is_reproducible_and_documented() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "100");
    gen(&b, "100");
    let mut total = 0;
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
        if f.ends_with(".jsonl") {
            total += x.iter().filter(|&&c| c == b'\n').count();
        }
    }
    assert_eq!(total, 100);
    let train_lines = fs::read_to_string(a.join("train.jsonl")).unwrap().lines().count();
    assert_eq!(train_lines, 80);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["generator"]["contrastive_fraction"], 0.6);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(a.join("resolved_config.txt").exists());
}

#[test]
fn train_eval_predict_round() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "60");
    let run = tmp.path().join("run");
    let log = train(&data, &run, &["--epochs", "1"]);
    assert_eq!(log.len(), 1);
    for key in ["epoch", "l_ate", "l_ote", "l_asc", "l_tsmtd", "l_prd", "l_final", "dev"] {
        assert!(log[0].get(key).is_some(), "{key}");
    }
    for f in ["checkpoint.bin", "last.bin", "resolved_config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("checkpoint.bin");
    let test = data.join("test.jsonl");
    let report = tmp.path().join("report.json");
    let e1 = ok(&["eval", "--checkpoint", path(&ckpt), "--data", path(&test), "--report", path(&report)]);
    let e2 = ok(&["eval", "--checkpoint", path(&ckpt), "--data", path(&test)]);
    assert_eq!(e1.stdout, e2.stdout);
    let r: serde_json::Value = serde_json::from_slice(&e1.stdout).unwrap();
    for key in ["ate_f1", "ote_f1", "asc_f1", "absa_f1", "sent_acc", "strata"] {
        assert!(r.get(key).is_some(), "{key}");
    }
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&fs::read(&report).unwrap()).unwrap(), r);

    let raw = tmp.path().join("raw.txt");
    fs::write(&raw, "the pasta was great\n\nservice was slow but the wine was fine\n").unwrap();
    let p = ok(&["predict", "--checkpoint", path(&ckpt), "--input", path(&raw)]);
    let lines: Vec<serde_json::Value> = String::from_utf8(p.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["tokens"].as_array().unwrap().len(), 4);
    let p = ok(&["predict", "--checkpoint", path(&ckpt), "--input", path(&test)]);
    assert_eq!(String::from_utf8(p.stdout).unwrap().lines().count(), fs::read_to_string(&test).unwrap().lines().count());
}

#[test]
fn zero_weight_matches_disabled_auxiliary_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "40");
    let a = train(&data, &tmp.path().join("a"), &["--epochs", "2", "--alpha", "0"]);
    let b = train(&data, &tmp.path().join("b"), &["--epochs", "2", "--no-tsmtd", "--no-prd"]);
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x["l_final"], y["l_final"]);
        assert_eq!(x["dev"], y["dev"]);
    }
}

#[test]
fn ablate_emits_every_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "50");
    let out = tmp.path().join("abl");
    let mut args = vec!["ablate", "--data", path(&data), "--out", path(&out), "--seeds", "1", "--epochs", "1"];
    args.extend(SMALL);
    ok(&args);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0]["label"], "full");
    assert_eq!(rows[7]["label"], "w/o all");
    assert_eq!(fs::read_to_string(out.join("ablation.txt")).unwrap().lines().filter(|l| l.contains("w/o")).count(), 7);
}

#[test]
fn gradcheck_exit_codes() {
    let out = ok(&["gradcheck"]);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["pass"], true);
    let other = ok(&["gradcheck", "--seed", "1"]);
    assert_ne!(out.stdout, other.stdout);
    assert_eq!(dcran(&["gradcheck", "--tol", "0"]).status.code(), Some(3));
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let run = tmp.path().join("run");
    assert_eq!(dcran(&["train", "--data", path(&missing), "--out", path(&run)]).status.code(), Some(2));
    assert_eq!(dcran(&["gradcheck", "--set", "model.bogus=1"]).status.code(), Some(1));
    assert_eq!(dcran(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dcran(&["gen-data", "--out", path(&run), "--contrastive", "2"]).status.code(), Some(1));
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "{not json\n").unwrap();
    let data = tmp.path().join("data");
    gen(&data, "20");
    let ckpt_run = tmp.path().join("c");
    train(&data, &ckpt_run, &["--epochs", "0"]);
    let code = dcran(&["eval", "--checkpoint", path(&ckpt_run.join("checkpoint.bin")), "--data", path(&bad)]).status.code();
    assert_eq!(code, Some(1));
}
