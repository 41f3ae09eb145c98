//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use common::{brute_force_kappa, decision_maps, random_review, sample_corpus, setting, CrashingProvider};
use reviewsim::analysis::{agreement, decision_change, relative_reduction};
use reviewsim::corpus::{largest_remainder_allocation, stratified_sample, synthetic_corpus, DecisionCategory, REFERENCE_COUNTS};
use reviewsim::documents::{parse_review, serialize_review};
use reviewsim::experiments::{run_experiment, ReuseDecision, RunOptions};
use reviewsim::pipeline::{audit_visibility, batches, quota_for_batch, PipelineOptions};
use reviewsim::store::{ArtifactKind, Store};
use reviewsim::{MockProvider, PaperSimState, PromptTemplateSet, SimulationConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn opts() -> RunOptions {
    RunOptions::default()
}

fn determinism() -> Check {
    let corpus = sample_corpus(20, 11);
    let templates = PromptTemplateSet::builtin();
    let base = setting("baseline");
    let start = Instant::now();
    let mut prints = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        let store = Store::open(dir.path()).map_err(err)?;
        let outcome = run_experiment(&base, &corpus, &templates, &MockProvider::new(0), &store, &opts()).map_err(err)?;
        prints.push(store.fingerprint(&outcome.run_id).map_err(err)?);
    }
    let elapsed = start.elapsed();
    ensure(prints[0] == prints[1], "artifact trees differ between identical runs")?;
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("{} files identical, {:.2?} for both runs", prints[0].len(), elapsed))
}

fn accepted_per_batch(states: &[PaperSimState], batch_size: usize) -> Vec<(usize, usize)> {
    let ids: Vec<String> = states.iter().map(|s| s.paper_id.clone()).collect();
    let accepted: BTreeMap<&str, bool> = states
        .iter()
        .map(|s| (s.paper_id.as_str(), s.decision.as_ref().is_some_and(|d| d.accept)))
        .collect();
    batches(&ids, batch_size)
        .into_iter()
        .map(|(i, batch)| {
            let got = batch.iter().filter(|id| accepted[id.as_str()]).count();
            (quota_for_batch(i, batch_size, 0.32), got)
        })
        .collect()
}

fn quota_exactness() -> Check {
    let corpus = sample_corpus(500, 5);
    ensure(corpus.len() == 500, format!("corpus has {} papers", corpus.len()))?;
    let config = SimulationConfig::default();
    let dir = tempfile::tempdir().map_err(err)?;
    let store = Store::open(dir.path()).map_err(err)?;
    let options = RunOptions {
        pipeline: PipelineOptions {
            workers: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let states = run_experiment(&setting("baseline"), &corpus, &PromptTemplateSet::builtin(), &MockProvider::new(0), &store, &options)
        .map_err(err)?
        .states;
    let total = states.iter().filter(|s| s.decision.as_ref().is_some_and(|d| d.accept)).count();
    ensure(total == 160, format!("{total} accepted"))?;
    let per_batch = accepted_per_batch(&states, config.batch_size);
    for (i, (quota, got)) in per_batch.iter().enumerate() {
        ensure(quota == got, format!("batch {} accepted {got}, quota {quota}", i + 1))?;
        ensure(*got == 3 || *got == 4, format!("batch {} accepted {got}", i + 1))?;
    }
    Ok(format!("160/500 accepted, {} batches all at quota", per_batch.len()))
}

fn stratified_sampling() -> Check {
    let corpus = synthetic_corpus(&REFERENCE_COUNTS, 1);
    let sample = stratified_sample(&corpus, 523, 42).map_err(err)?;
    let counts: Vec<usize> = REFERENCE_COUNTS.iter().map(|(c, _)| sample.count(*c)).collect();
    ensure(counts == vec![350, 125, 29, 19], format!("counts {counts:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..1000 {
        let counts: Vec<usize> = (0..4).map(|_| rng.gen_range(0..200)).collect();
        let total: usize = counts.iter().sum();
        if total == 0 {
            continue;
        }
        let n = rng.gen_range(0..=total);
        let alloc = largest_remainder_allocation(&counts, n);
        ensure(alloc.iter().sum::<usize>() == n, format!("trial {trial}: allocation does not sum to n"))?;
        // Each category gets floor or ceil of its exact share, and no
        // category with a smaller remainder is rounded up over a larger one.
        let exact: Vec<f64> = counts.iter().map(|&c| n as f64 * c as f64 / total as f64).collect();
        for (a, e) in alloc.iter().zip(&exact) {
            ensure((*a as f64 - e).abs() < 1.0, format!("trial {trial}: {a} vs exact {e}"))?;
        }
        let rem = |i: usize| (n * counts[i]) % total;
        for i in 0..4 {
            for k in 0..4 {
                let up_i = alloc[i] * total > n * counts[i];
                let up_k = alloc[k] * total > n * counts[k];
                ensure(!(up_i && !up_k && rem(k) > rem(i)), format!("trial {trial}: remainder order violated"))?;
            }
        }
        if trial % 100 == 0 {
            let corpus = synthetic_corpus(
                &[
                    (DecisionCategory::Reject, counts[0]),
                    (DecisionCategory::Poster, counts[1]),
                    (DecisionCategory::Spotlight, counts[2]),
                    (DecisionCategory::Oral, counts[3]),
                ],
                trial,
            );
            let s = stratified_sample(&corpus, n, trial).map_err(err)?;
            let got: Vec<usize> = DecisionCategory::ALL.iter().map(|c| s.count(*c)).collect();
            let want = largest_remainder_allocation(
                &DecisionCategory::ALL.iter().map(|c| corpus.count(*c)).collect::<Vec<_>>(),
                n,
            );
            ensure(got == want, format!("trial {trial}: sample {got:?} vs allocation {want:?}"))?;
        }
    }
    Ok("523 -> 350/125/29/19; 1000 random allocations satisfy largest remainder".into())
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let p = rng.gen_range(0.0..1.0);
        let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(p)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(p)).collect();
        let (ma, mb) = decision_maps(&a, &b);
        let report = agreement(&ma, &mb).map_err(err)?;
        worst = worst.max((report.kappa - brute_force_kappa(&a, &b)).abs());
    }
    ensure(worst <= 1e-12, format!("max kappa deviation {worst:e}"))?;
    let m = |acc: &[&str]| -> BTreeMap<String, bool> {
        ["p1", "p2", "p3", "p4"].iter().map(|p| (p.to_string(), acc.contains(p))).collect()
    };
    let hand = agreement(&m(&["p1", "p2"]), &m(&["p1", "p3"])).map_err(err)?;
    ensure(hand.jaccard == 1.0 / 3.0 && hand.kappa == 0.0 && hand.percent_agree == 50.0, format!("hand case {hand:?}"))?;
    Ok(format!("max kappa deviation {worst:e}; hand case exact"))
}

fn paper_identities() -> Check {
    let a = relative_reduction(0.224, 0.163);
    let b = relative_reduction(195.5, 159.0);
    let change = decision_change(62.91);
    ensure((a - 27.2).abs() <= 0.1, format!("{a}"))?;
    ensure((b - 18.7).abs() <= 0.1, format!("{b}"))?;
    ensure((change - 37.09).abs() <= 0.01, format!("{change}"))?;
    // The same quantity through the agreement report.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 10_000;
    let a_dec: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
    let b_dec: Vec<bool> = a_dec.iter().enumerate().map(|(i, &x)| if i < 3709 { !x } else { x }).collect();
    let (ma, mb) = decision_maps(&a_dec, &b_dec);
    let report = agreement(&ma, &mb).map_err(err)?;
    ensure((report.decision_change - 37.09).abs() <= 0.01, format!("report {:?}", report))?;
    Ok(format!("{a:.2}% / {b:.2}% / {change:.2}%"))
}

fn visibility() -> Check {
    let corpus = sample_corpus(20, 6);
    let dir = tempfile::tempdir().map_err(err)?;
    let store = Store::open(dir.path()).map_err(err)?;
    let options = RunOptions {
        pipeline: PipelineOptions {
            capture_prompts: true,
            ..Default::default()
        },
        ..Default::default()
    };
    let outcome = run_experiment(&setting("baseline"), &corpus, &PromptTemplateSet::builtin(), &MockProvider::new(0), &store, &options)
        .map_err(err)?;
    let run = store.open_run(&outcome.run_id).map_err(err)?;
    let mut checked = 0;
    for id in corpus.ids() {
        for j in 1..=3 {
            for name in [format!("phase1_review_{j}"), format!("phase2_rebuttal_{j}")] {
                ensure(run.prompt_path(id, &name).exists(), format!("{id}: prompt {name} not captured"))?;
                checked += 1;
            }
        }
        let violations = audit_visibility(&run, id).map_err(err)?;
        ensure(violations.is_empty(), format!("{id}: {violations:?}"))?;
    }
    Ok(format!("{checked} prompts over 20 papers, no leaks"))
}

fn collect_json(dir: &Path, out: &mut Vec<(String, Value)>) -> Result<(), String> {
    for entry in std::fs::read_dir(dir).map_err(err)? {
        let path = entry.map_err(err)?.path();
        if path.is_dir() {
            collect_json(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") && !path.ends_with("manifest.json") {
            let text = std::fs::read_to_string(&path).map_err(err)?;
            out.push((path.display().to_string(), serde_json::from_str(&text).map_err(err)?));
        }
    }
    Ok(())
}

fn has_rating(v: &Value) -> bool {
    match v {
        Value::Object(map) => map.iter().any(|(k, v)| k == "rating" || has_rating(v)),
        Value::Array(items) => items.iter().any(has_rating),
        Value::String(s) => s.lines().any(|l| {
            let l = l.trim_start().to_ascii_lowercase();
            l.starts_with("overall rating:") || l.starts_with("score:") || l.starts_with("rating:")
        }),
        _ => false,
    }
}

fn mechanism_flags() -> Check {
    let corpus = sample_corpus(20, 7);
    let templates = PromptTemplateSet::builtin();
    let dir = tempfile::tempdir().map_err(err)?;
    let store = Store::open(dir.path()).map_err(err)?;

    let no_rebuttal = run_experiment(&setting("no_rebuttal"), &corpus, &templates, &MockProvider::new(0), &store, &opts()).map_err(err)?;
    for s in &no_rebuttal.states {
        ensure(s.phase2_rebuttals.is_empty() && s.phase3_transcript.is_empty() && s.phase3_updated.is_empty(), format!("{}: discussion present", s.paper_id))?;
        ensure(s.final_ratings() == s.initial_ratings(), format!("{}: final != initial", s.paper_id))?;
    }
    let stray = no_rebuttal
        .manifest
        .artifacts
        .keys()
        .filter(|k| k.contains("phase2") || k.contains("phase3"))
        .count();
    ensure(stray == 0, format!("{stray} Phase II/III artifacts in no-rebuttal run"))?;

    let no_numeric = run_experiment(&setting("no_numeric_rating"), &corpus, &templates, &MockProvider::new(0), &store, &opts()).map_err(err)?;
    let mut docs = Vec::new();
    collect_json(&store.run_dir(&no_numeric.run_id), &mut docs)?;
    ensure(!docs.is_empty(), "no artifacts found")?;
    if let Some((path, _)) = docs.iter().find(|(_, v)| has_rating(v)) {
        return Err(format!("rating field in {path}"));
    }
    for (quota, got) in accepted_per_batch(&no_numeric.states, 10) {
        ensure(quota == got, format!("batch accepted {got}, quota {quota}"))?;
    }
    Ok(format!("no-rebuttal clean; {} no-numeric artifacts without ratings; quotas exact", docs.len()))
}

fn reuse_accounting() -> Check {
    let corpus = sample_corpus(20, 8);
    let templates = PromptTemplateSet::builtin();
    let dir = tempfile::tempdir().map_err(err)?;
    let store = Store::open(dir.path()).map_err(err)?;
    let base = run_experiment(&setting("baseline"), &corpus, &templates, &MockProvider::new(0), &store, &opts()).map_err(err)?;

    let mut persona = setting("malicious_1");
    persona.baseline_run = Some(base.run_id.clone());
    let mock = MockProvider::new(0);
    let out = run_experiment(&persona, &corpus, &templates, &mock, &store, &opts()).map_err(err)?;
    let (p1, p2) = (mock.calls("initial review"), mock.calls("author rebuttal"));
    ensure(p1 == 20 && p2 == 20, format!("{p1} Phase I and {p2} Phase II completions"))?;

    let plan = out.reuse.as_ref().ok_or("no reuse plan")?;
    let reused: Vec<&String> = plan.entries.iter().filter(|(_, d)| **d == ReuseDecision::Reuse).map(|(k, _)| k).collect();
    ensure(reused.len() == 80, format!("{} reused artifacts, expected 80", reused.len()))?;
    let run = store.open_run(&out.run_id).map_err(err)?;
    run.materialize().map_err(err)?;
    let base_dir = store.run_dir(&base.run_id);
    for path in &reused {
        ensure(out.manifest.artifacts[*path].sha256 == base.manifest.artifacts[*path].sha256, format!("{path}: hash differs"))?;
        let a = std::fs::read(run.dir().join(path)).map_err(err)?;
        let b = std::fs::read(base_dir.join(path)).map_err(err)?;
        ensure(a == b, format!("{path}: bytes differ"))?;
    }
    Ok(format!("20 + 20 completions; {} reused artifacts hash-identical", reused.len()))
}

fn crash_resume() -> Check {
    let corpus = sample_corpus(20, 10);
    let templates = PromptTemplateSet::builtin();
    let base = setting("baseline");

    let clean_dir = tempfile::tempdir().map_err(err)?;
    let clean_store = Store::open(clean_dir.path()).map_err(err)?;
    let clean = run_experiment(&base, &corpus, &templates, &MockProvider::new(0), &clean_store, &opts()).map_err(err)?;
    let want = clean_store.fingerprint(&clean.run_id).map_err(err)?;

    let dir = tempfile::tempdir().map_err(err)?;
    let store = Store::open(dir.path()).map_err(err)?;
    let crashing = CrashingProvider::new(0, "### Task: reviewer discussion", 25);
    ensure(run_experiment(&base, &corpus, &templates, &crashing, &store, &opts()).is_err(), "run did not crash")?;
    let listing = store.list_runs().map_err(err)?;
    let crashed = listing.runs.first().ok_or("crashed run missing")?.run_id.clone();
    let partial = store.open_run(&crashed).map_err(err)?;
    let transcripts = corpus.ids().filter(|id| partial.contains(id, ArtifactKind::Phase3Transcript, None)).count();
    let metas = corpus.ids().filter(|id| partial.contains(id, ArtifactKind::Phase4Metareview, None)).count();
    ensure(transcripts < 20, "crash happened after Phase III finished")?;
    drop(partial);

    let resume = RunOptions {
        resume_run: Some(crashed.clone()),
        ..Default::default()
    };
    let mock = MockProvider::new(0);
    run_experiment(&base, &corpus, &templates, &mock, &store, &resume).map_err(err)?;
    let got = store.fingerprint(&crashed).map_err(err)?;
    ensure(got == want, "resumed tree differs from uninterrupted run")?;
    ensure(mock.calls("initial review") < 60, "resume regenerated completed Phase I reviews")?;
    Ok(format!("crashed with {transcripts}/20 transcripts ({metas} meta-reviews); resumed tree identical"))
}

fn parser_totality() -> Check {
    let corpus = sample_corpus(20, 12);
    let templates = PromptTemplateSet::builtin();
    let n = corpus.len() as u64;
    for name in ["baseline", "no_numeric_rating", "malicious_3", "ac_inclusive", "identity_k3_r30_high"] {
        let mock = MockProvider::new(0);
        let dir = tempfile::tempdir().map_err(err)?;
        let store = Store::open(dir.path()).map_err(err)?;
        run_experiment(&setting(name), &corpus, &templates, &mock, &store, &opts()).map_err(|e| format!("{name}: {e}"))?;
        let expect = [
            ("initial review", 3 * n),
            ("author rebuttal", 3 * n),
            ("discussion opening", n),
            ("reviewer discussion", 3 * n),
            ("meta-review", n),
            ("final decisions", 2),
        ];
        for (task, count) in expect {
            ensure(mock.calls(task) == count, format!("{name}: {} {task} calls, expected {count} (re-prompts)", mock.calls(task)))?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..10_000 {
        let doc = random_review(&mut rng);
        let parsed = parse_review(&serialize_review(&doc), doc.reviewer_index, doc.rating.is_some()).map_err(|e| format!("doc {i}: {e}"))?;
        ensure(parsed == doc, format!("doc {i} does not round-trip"))?;
    }

    let example = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/example_review.txt")).map_err(err)?;
    let doc = parse_review(&example, 1, true).map_err(err)?;
    ensure(doc.rating == Some(5.0), format!("rating {:?}", doc.rating))?;
    ensure(
        !doc.significance_novelty.is_empty() && !doc.reasons_accept.is_empty() && !doc.reasons_reject.is_empty() && !doc.suggestions.is_empty(),
        "example has an empty section",
    )?;
    Ok("no re-prompts over 5 settings; 10000 round-trips; example review rating 5".into())
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("determinism", determinism),
        ("quota exactness", quota_exactness),
        ("stratified sampling", stratified_sampling),
        ("metric oracles", metric_oracles),
        ("derived identities", paper_identities),
        ("visibility audit", visibility),
        ("mechanism flags", mechanism_flags),
        ("reuse accounting", reuse_accounting),
        ("crash and resume", crash_resume),
        ("parser totality", parser_totality),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
