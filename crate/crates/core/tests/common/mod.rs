//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use reviewsim::corpus::{stratified_sample, synthetic_corpus, Corpus, REFERENCE_COUNTS};
use reviewsim::experiments::{standard_sweep, ExperimentSetting};
use reviewsim::provider::ProviderIdentity;
use reviewsim::{ChatProvider, ChatRequest, ChatResponse, EmbeddingVector, MockProvider, ProviderError, ReviewDocument};

pub fn sample_corpus(n: usize, seed: u64) -> Corpus {
    stratified_sample(&synthetic_corpus(&REFERENCE_COUNTS, seed), n, seed).unwrap()
}

pub fn setting(name: &str) -> ExperimentSetting {
    standard_sweep().into_iter().find(|s| s.name == name).expect("setting in sweep")
}

/// Mock wrapper that fails its `fail_at`-th completion of `task` and
/// every completion of that task after it.
pub struct CrashingProvider {
    pub inner: MockProvider,
    pub task_marker: &'static str,
    pub fail_at: usize,
    seen: AtomicUsize,
}

impl CrashingProvider {
    pub fn new(seed: u64, task_marker: &'static str, fail_at: usize) -> Self {
        Self {
            inner: MockProvider::new(seed),
            task_marker,
            fail_at,
            seen: AtomicUsize::new(0),
        }
    }
}

impl ChatProvider for CrashingProvider {
    fn identity(&self) -> ProviderIdentity {
        self.inner.identity()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let hit = request.turns.first().is_some_and(|t| t.content.contains(self.task_marker));
        if hit && self.seen.fetch_add(1, Ordering::SeqCst) + 1 >= self.fail_at {
            return Err(ProviderError::InvalidRequest("simulated crash".into()));
        }
        self.inner.complete(request)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        self.inner.embed(texts)
    }
}

const WORDS: &[&str] = &[
    "method", "results", "graph", "training", "model", "robust", "dataset", "loss", "bound", "sparse",
    "attention", "kernel", "policy", "agent", "latent", "prior", "figure", "table", "claim", "analysis",
];

fn sentence<R: Rng>(rng: &mut R, max_words: usize) -> String {
    let n = rng.gen_range(1..=max_words);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn items<R: Rng>(rng: &mut R, max: usize) -> Vec<String> {
    (0..rng.gen_range(0..=max)).map(|_| sentence(rng, 12)).collect()
}

/// A random document that satisfies the review format.
pub fn random_review<R: Rng>(rng: &mut R) -> ReviewDocument {
    let rating = if rng.gen_bool(0.8) {
        Some(1.0 + rng.gen_range(0..=36) as f64 * 0.25)
    } else {
        None
    };
    ReviewDocument::new(
        rng.gen_range(1..=3),
        rating,
        sentence(rng, 30),
        items(rng, 5),
        items(rng, 6),
        items(rng, 4),
    )
}

/// Cohen's kappa from an explicit 2x2 confusion matrix.
pub fn brute_force_kappa(a: &[bool], b: &[bool]) -> f64 {
    let mut m = [[0f64; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        m[x as usize][y as usize] += 1.0;
    }
    let n: f64 = m.iter().flatten().sum();
    let observed = (m[0][0] + m[1][1]) / n;
    let mut expected = 0.0;
    for (k, row) in m.iter().enumerate() {
        let row: f64 = row.iter().sum();
        let col: f64 = m[0][k] + m[1][k];
        expected += row * col;
    }
    expected /= n * n;
    if (1.0 - expected).abs() < f64::EPSILON {
        1.0
    } else {
        (observed - expected) / (1.0 - expected)
    }
}

pub fn decision_maps(a: &[bool], b: &[bool]) -> (BTreeMap<String, bool>, BTreeMap<String, bool>) {
    let key = |i: usize| format!("p{i:04}");
    (
        a.iter().enumerate().map(|(i, &x)| (key(i), x)).collect(),
        b.iter().enumerate().map(|(i, &x)| (key(i), x)).collect(),
    )
}
