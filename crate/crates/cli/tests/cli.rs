use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn reviewsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reviewsim"))
        .args(args)
        .env_remove("REVIEW_SIM_API_KEY")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let mut full = args.to_vec();
    full.push("--json");
    let out = reviewsim(&full);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth_sample(dir: &Path, n: usize) -> String {
    let full = dir.join("corpus.jsonl");
    let sample = dir.join("sample.jsonl");
    ok_json(&["corpus", "synth", "--out", p(&full)]);
    ok_json(&["corpus", "sample", p(&full), "--n", &n.to_string(), "--seed", "3", "--out", p(&sample)]);
    sample.to_str().unwrap().to_string()
}

#[test]
fn reference_corpus_counts_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    ok_json(&["corpus", "synth", "--out", p(&path)]);
    let v = ok_json(&["corpus", "validate", p(&path)]);
    assert_eq!(v["papers"], 523);
    assert_eq!(v["counts"]["reject"], 350);
    assert_eq!(v["counts"]["poster"], 125);
    assert_eq!(v["counts"]["spotlight"], 29);
    assert_eq!(v["counts"]["oral"], 19);
    let text = reviewsim(&["corpus", "validate", p(&path)]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("reject: 350"));
}

#[test]
fn synth_counts_follow_reject_poster_spotlight_oral() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let v = ok_json(&["corpus", "synth", "--out", p(&path), "--counts", "4,3,2,1"]);
    assert_eq!(v["counts"]["reject"], 4);
    assert_eq!(v["counts"]["poster"], 3);
    assert_eq!(v["counts"]["spotlight"], 2);
    assert_eq!(v["counts"]["oral"], 1);
}

#[test]
fn duplicate_id_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    ok_json(&["corpus", "synth", "--out", p(&path), "--counts", "1,0,0,0"]);
    let line = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, format!("{line}{line}")).unwrap();
    let out = reviewsim(&["corpus", "validate", p(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sub0001"));
}

#[test]
fn empty_sample_is_fine() {
    let dir = tempfile::tempdir().unwrap();
    let sample = synth_sample(dir.path(), 5);
    let empty = dir.path().join("empty.jsonl");
    let v = ok_json(&["corpus", "sample", &sample, "--n", "0", "--out", p(&empty)]);
    assert_eq!(v["papers"], 0);
    assert_eq!(std::fs::read_to_string(&empty).unwrap(), "");
}

#[test]
fn run_resume_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_sample(dir.path(), 20);
    let store = dir.path().join("runs");
    let base = ok_json(&["run", "--corpus", &corpus, "--setting", "baseline", "--store", p(&store)]);
    assert_eq!(base["papers"], 20);
    assert_eq!(base["status"], "complete");
    let base_id = base["run_id"].as_str().unwrap();
    assert_eq!(std::fs::read_dir(store.join("runs").join(base_id).join("papers")).unwrap().count(), 20);

    let again = reviewsim(&["run", "--corpus", &corpus, "--resume", base_id, "--store", p(&store)]);
    assert_eq!(again.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&again.stdout).contains("0 artifacts generated"));

    let persona = ok_json(&["run", "--corpus", &corpus, "--setting", "malicious_1", "--baseline", base_id, "--store", p(&store)]);
    assert_eq!(persona["artifacts_reused"], 80);
    let persona_id = persona["run_id"].as_str().unwrap();

    let self_report = ok_json(&["analyze", "--run", base_id, "--baseline-run", base_id, "--store", p(&store), "--out", p(&dir.path().join("self"))]);
    assert_eq!(self_report["agreement"]["kappa"], 1.0);
    let csv = std::fs::read_to_string(dir.path().join("self/agreement.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(",1.000000,1.000000,100.000000,0.000000"));

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok_json(&["analyze", "--run", persona_id, "--baseline-run", base_id, "--store", p(&store), "--out", p(out)]);
    }
    for f in ["ratings.csv", "agreement.csv", "reasons.csv", "similarity.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let usage = reviewsim(&["analyze", "--run", persona_id, "--metrics", "agreement", "--store", p(&store), "--out", p(&a)]);
    assert_eq!(usage.status.code(), Some(1));
}

#[test]
fn remote_without_key_fails_before_any_call() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_sample(dir.path(), 3);
    let store = dir.path().join("runs");
    let out = reviewsim(&["run", "--corpus", &corpus, "--setting", "baseline", "--provider", "remote", "--store", p(&store)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!store.join("runs").exists() || std::fs::read_dir(store.join("runs")).unwrap().count() == 0);
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(reviewsim(&["run", "--corpus", "x.jsonl"]).status.code(), Some(1));
    assert_eq!(reviewsim(&["frobnicate"]).status.code(), Some(1));
    for cmd in [vec!["--help"], vec!["corpus", "--help"], vec!["run", "--help"], vec!["analyze", "--help"], vec!["runs", "--help"]] {
        assert_eq!(reviewsim(&cmd).status.code(), Some(0), "{cmd:?}");
    }
}

#[test]
fn analyzing_an_unfinished_run_reports_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_sample(dir.path(), 4);
    let store = dir.path().join("runs");
    let base = ok_json(&["run", "--corpus", &corpus, "--setting", "baseline", "--store", p(&store)]);
    let id = base["run_id"].as_str().unwrap();
    let manifest = store.join("runs").join(id).join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap().replace("\"complete\"", "\"failed\"");
    std::fs::write(&manifest, text).unwrap();
    let out = reviewsim(&["analyze", "--run", id, "--store", p(&store), "--out", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(4));
}
