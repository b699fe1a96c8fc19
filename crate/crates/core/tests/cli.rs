use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_evisnap");

fn evisnap(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).arg("--out-dir").arg(dir).args(args).env_remove("EVISNAP_OUT_DIR").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = evisnap(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_run() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    for args in [
        &["synth", "--n-users", "40", "--n-items", "20", "--k-true", "6"][..],
        &["split"],
        &["bank", "--k", "6"],
        &["activate"],
        &["train", "--epochs", "10"],
    ] {
        ok(&dir, args);
    }
    (tmp, dir)
}

fn file_hashes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.file_name().unwrap().to_string_lossy().starts_with("manifest-"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().to_string(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn bank_rejects_k_below_two() {
    let (_tmp, dir) = small_run();
    let out = evisnap(&dir, &["bank", "--k", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("K = 1"));
}

#[test]
fn unknown_subcommand_and_missing_inputs_fail() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(!evisnap(tmp.path(), &["frobnicate"]).status.success());
    let out = evisnap(tmp.path(), &["train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing input file"));
}

#[test]
fn bad_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "seeds = []\n").unwrap();
    ok(tmp.path(), &["synth", "--n-users", "20", "--n-items", "10", "--ratings-per-user", "5"]);
    ok(tmp.path(), &["split"]);
    ok(tmp.path(), &["bank", "--k", "4"]);
    ok(tmp.path(), &["activate"]);
    let out = evisnap(tmp.path(), &["--config", cfg.to_str().unwrap(), "evaluate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeds"));
}

#[test]
fn explain_output_reconstructs_the_score() {
    let (_tmp, dir) = small_run();
    let json: Value = serde_json::from_str(&ok(&dir, &["explain", "--user", "u005", "--item", "i002", "--top", "3"])).unwrap();
    assert!(json["reconstruction_residual"].as_f64().unwrap() <= 1e-9);
    let positive = json["top_positive"].as_array().unwrap();
    let negative = json["top_negative"].as_array().unwrap();
    assert!(positive.len() <= 3 && negative.len() <= 3);
    for entry in positive.iter().chain(negative) {
        let parts = ["int_term", "user_term", "item_term"].map(|k| entry[k].as_f64().unwrap());
        assert!((entry["contrib"].as_f64().unwrap() - parts.iter().sum::<f64>()).abs() <= 1e-15);
    }
    let table = ok(&dir, &["explain", "--user", "u005", "--item", "i002", "--format", "table"]);
    assert!(table.contains("Concept (contrib)"));
}

#[test]
fn whatif_reports_delta() {
    let (_tmp, dir) = small_run();
    let json: Value =
        serde_json::from_str(&ok(&dir, &["whatif", "--user", "u005", "--item", "i002", "--side", "user", "--k", "0", "--value", "-0.3"]))
            .unwrap();
    let (y, new_y, delta) = (json["y_c"].as_f64().unwrap(), json["new_y_c"].as_f64().unwrap(), json["delta"].as_f64().unwrap());
    assert!((y + delta - new_y).abs() <= 1e-15);
    assert!(!evisnap(&dir, &["whatif", "--user", "u005", "--item", "i002", "--side", "item", "--k", "6", "--value", "0"]).status.success());
}

#[test]
fn evaluate_writes_one_row_per_seed_and_a_mean() {
    let (_tmp, dir) = small_run();
    ok(&dir, &["evaluate", "--seeds", "3,4,5", "--epochs", "5"]);
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows[0], "run_seed,mae,rmse");
    assert_eq!(rows.len(), 5);
    assert!(rows[4].starts_with("mean,"));
    for row in &rows[1..] {
        let cols: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!(cols[1] >= cols[0]);
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest-evaluate.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([3, 4, 5]));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["inputs"].as_object().unwrap().len() >= 3);
}

#[test]
fn diagnose_writes_curves_with_mean_rows() {
    let (_tmp, dir) = small_run();
    ok(&dir, &["diagnose", "--sample", "10"]);
    let curves = std::fs::read_to_string(dir.join("curves.csv")).unwrap();
    assert!(curves.starts_with("pair_id,mode,m,value\n"));
    for mode in ["pos", "neg", "abs", "random", "sufficiency", "mass"] {
        assert!(curves.lines().any(|l| l.starts_with(&format!("mean,{mode},"))), "{mode}");
    }
    let pairs: std::collections::BTreeSet<&str> =
        curves.lines().skip(1).map(|l| l.split(',').next().unwrap()).filter(|p| *p != "mean").collect();
    assert_eq!(pairs.len(), 10);
}

#[test]
fn commands_leave_inputs_untouched() {
    let (_tmp, dir) = small_run();
    let before = file_hashes(&dir);
    ok(&dir, &["validate"]);
    ok(&dir, &["explain", "--user", "u001", "--item", "i001"]);
    ok(&dir, &["whatif", "--user", "u001", "--item", "i001", "--side", "item", "--k", "1", "--value", "0.2"]);
    let after = file_hashes(&dir);
    for (name, bytes) in &before {
        assert_eq!(&after[name], bytes, "{name} changed");
    }
}

#[test]
fn out_dir_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("env-run");
    let out = Command::new(BIN)
        .args(["synth", "--n-users", "10", "--n-items", "5", "--ratings-per-user", "3"])
        .env("EVISNAP_OUT_DIR", &dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("ratings.csv").exists());
    assert!(dir.join("manifest-synth.json").exists());
}

#[test]
fn validate_flags_broken_cards() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--n-users", "10", "--n-items", "5", "--ratings-per-user", "3"]);
    let path = tmp.path().join("user_cards.jsonl");
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"polarity\":1", "\"polarity\":0", 1);
    std::fs::write(&path, text).unwrap();
    let out = evisnap(tmp.path(), &["validate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("problem"));
}
