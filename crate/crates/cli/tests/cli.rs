use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn malbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_malbench")).args(args).output().expect("spawn malbench")
}

fn with_config(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("malbench.toml");
    let mut all = vec!["--config", config.to_str().unwrap()];
    all.extend_from_slice(args);
    malbench(&all)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path) {
    let o = malbench(&["synth", "--out", dir.to_str().unwrap(), "--apks-per-category", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn run_then_rerun_hits_cache() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = with_config(dir.path(), &["run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("out/report.md")).unwrap();
    assert!(report.contains("| Model | Consistency |"));
    assert!(dir.path().join("out/manifests/run.json").exists());

    let o = with_config(dir.path(), &["annotate"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0 requests"), "{}", stdout(&o));
}

#[test]
fn missing_corpus_fails_before_work() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    fs::remove_file(dir.path().join("functions.jsonl")).unwrap();
    let o = with_config(dir.path(), &["annotate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("functions.jsonl"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_outputs_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for cmd in ["score-descriptors", "regen-names", "describe-apps"] {
        let o = with_config(dir.path(), &[cmd]);
        assert!(!o.status.success(), "{cmd}");
        assert!(stderr(&o).contains("outputs.jsonl"), "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn single_metric_family() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for cmd in ["annotate", "score-descriptors", "regen-names"] {
        assert!(with_config(dir.path(), &[cmd]).status.success());
    }
    let o = with_config(dir.path(), &["metrics", "--only", "consistency"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out/mock");
    assert!(out.join("consistency.jsonl").exists());
    assert!(!out.join("fidelity.jsonl").exists() && !out.join("semantic.jsonl").exists());
    let cells: Value = serde_json::from_str(&fs::read_to_string(out.join("cells.json")).unwrap()).unwrap();
    let metrics: Vec<&str> = cells.as_array().unwrap().iter().map(|c| c["metric"].as_str().unwrap()).collect();
    assert_eq!(metrics, ["mcs", "ncs"]);
}

#[test]
fn accuracy_gate_failure_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let path = dir.path().join("manifest.json");
    let mut manifest: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let labels = ["Adware", "Banker", "SMSFraud", "Spyware"];
    for (i, entry) in manifest.as_array_mut().unwrap().iter_mut().enumerate() {
        entry["category"] = Value::from(labels[i % 4]);
    }
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    assert!(with_config(dir.path(), &["annotate"]).status.success());
    let o = with_config(dir.path(), &["metrics", "--only", "fidelity"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("accuracy"), "{}", stderr(&o));
}

#[test]
fn separate_scorer_backend_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("malbench.toml");
    let mut text = fs::read_to_string(&cfg).unwrap();
    text = text.replace("k = [2, 5, 8]\n", "k = [2, 5, 8]\nscorer = \"big\"\n");
    text.push_str("\n[[backends]]\nbackend_id = \"big\"\nkind = \"mock\"\nmodel_name = \"big-model\"\ncontext_tokens = 16384\nseed = 99\n");
    fs::write(&cfg, text).unwrap();
    assert!(with_config(dir.path(), &["annotate"]).status.success());
    let o = with_config(dir.path(), &["score-descriptors"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores = read_jsonl(&dir.path().join("out/mock/descriptor_scores.jsonl"));
    assert!(!scores.is_empty());
    assert!(scores.iter().all(|s| s["model_id"] == "mock" && s["scorer_id"] == "big"));
    assert!(!dir.path().join("out/big").exists());
}

/// Make the corpus's original names equal to the mock's suggestions.
fn adopt_suggested_names(dir: &Path) {
    let outputs = read_jsonl(&dir.join("out/mock/outputs.jsonl"));
    let functions_path = dir.join("functions.jsonl");
    let mut lines = Vec::new();
    for mut f in read_jsonl(&functions_path) {
        let o = outputs
            .iter()
            .find(|o| o["apk_id"] == f["apk_id"] && o["function_id"] == f["function_id"])
            .unwrap();
        f["method_name"] = o["suggested_name"].clone();
        lines.push(serde_json::to_string(&f).unwrap());
    }
    fs::write(&functions_path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn copy_heavy_model_is_excluded() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    assert!(with_config(dir.path(), &["annotate"]).status.success());
    adopt_suggested_names(dir.path());
    assert!(with_config(dir.path(), &["run"]).status.success());
    let o = with_config(dir.path(), &["rename-experiment"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("excluded from rename comparison, copy rate 100.00%"), "{}", stdout(&o));
    assert!(!dir.path().join("out/mock/renamed").exists());
}

#[test]
fn zero_diff_rename_reports_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("malbench.toml");
    let text = fs::read_to_string(&cfg).unwrap();
    fs::write(&cfg, text + "\n[rename]\ncopy_rate_threshold = 1.0\n").unwrap();
    assert!(with_config(dir.path(), &["annotate"]).status.success());
    adopt_suggested_names(dir.path());
    assert!(with_config(dir.path(), &["run"]).status.success());
    let o = with_config(dir.path(), &["--format", "json", "rename-experiment"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    let deltas = report["deltas"].as_array().unwrap();
    assert_eq!(deltas.len(), 8);
    assert!(deltas.iter().all(|d| d["percent"] == 0.0 && d["old_mean"] == d["new_mean"]));
}

#[test]
fn report_formats() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    assert!(with_config(dir.path(), &["run"]).status.success());
    let o = with_config(dir.path(), &["--format", "csv", "report"]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert!(csv.starts_with("kind,row,group,metric,"));
    let o = with_config(dir.path(), &["--format", "xml", "report"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("xml"));
}

#[test]
fn ingest_and_dedupe() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let m = dir.path().join("manifest.json");
    let f = dir.path().join("functions.jsonl");
    let o = malbench(&["ingest", "--manifest", m.to_str().unwrap(), "--functions", f.to_str().unwrap()]);
    assert!(o.status.success());
    let stats: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(stats["apks"], 20);
    let out = dir.path().join("dedup");
    let o = with_config(dir.path(), &["dedupe", "--out", out.to_str().unwrap(), "--bucket-bytes", "100000000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("kept "));
    assert!(out.join("manifest.json").exists());
}
