//! Rating, agreement and text statistics over finished runs.
//!
//! Everything here reads [`PaperSimState`]s (see
//! [`crate::pipeline::load_states`]); only similarity and reason
//! categorization call a provider.

mod reasons;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::documents::PaperDecision;
use crate::pipeline::{PaperSimState, PipelineError};
use crate::provider::{ChatProvider, ProviderError};

pub use reasons::{
    categorize_reasons, CategoryShare, CategorySpec, ReasonCategory, ReasonDistribution, SideDistribution,
    OTHER_CATEGORY,
};
pub use report::{write_report, RunData, REPORT_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no ratings in this run")]
    RatingsAbsent,
    #[error("runs cover different papers")]
    PaperSetMismatch,
    #[error("no artifacts of the requested kind")]
    NoArtifacts,
    #[error("paper {0} has no decision")]
    MissingDecision(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Template(#[from] crate::personas::TemplateError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which ratings to read: initial (Phase I) or post-discussion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingPhase {
    Initial,
    Final,
}

impl RatingPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            RatingPhase::Initial => "initial",
            RatingPhase::Final => "final",
        }
    }

    fn ratings(self, state: &PaperSimState) -> Vec<f64> {
        let r = match self {
            RatingPhase::Initial => state.initial_ratings(),
            RatingPhase::Final => state.final_ratings(),
        };
        r.into_iter().flatten().collect()
    }
}

/// Mean and sample standard deviation; the deviation is 0 for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingStats {
    pub mean: f64,
    /// Sample std of the per-paper mean ratings.
    pub dispersion_across_papers: f64,
    /// Mean over papers of the sample std of that paper's ratings.
    pub inter_reviewer_disagreement: f64,
    pub papers: usize,
    pub ratings: usize,
}

pub fn rating_stats(states: &[PaperSimState], phase: RatingPhase) -> Result<RatingStats, AnalysisError> {
    let per_paper: Vec<Vec<f64>> = states
        .iter()
        .map(|s| phase.ratings(s))
        .filter(|r| !r.is_empty())
        .collect();
    if per_paper.is_empty() {
        return Err(AnalysisError::RatingsAbsent);
    }
    let all: Vec<f64> = per_paper.iter().flatten().copied().collect();
    let means: Vec<f64> = per_paper.iter().map(|r| mean_std(r).0).collect();
    let stds: Vec<f64> = per_paper.iter().map(|r| mean_std(r).1).collect();
    Ok(RatingStats {
        mean: mean_std(&all).0,
        dispersion_across_papers: mean_std(&means).1,
        inter_reviewer_disagreement: mean_std(&stds).0,
        papers: per_paper.len(),
        ratings: all.len(),
    })
}

/// `100 * (before - after) / before`.
pub fn relative_reduction(before: f64, after: f64) -> f64 {
    assert!(before > 0.0, "relative_reduction needs a positive baseline");
    100.0 * (before - after) / before
}

/// Percentage of papers whose decision flipped.
pub fn decision_change(percent_agree: f64) -> f64 {
    100.0 - percent_agree
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub jaccard: f64,
    pub kappa: f64,
    pub percent_agree: f64,
    pub decision_change: f64,
    pub papers: usize,
}

/// Agreement of two accept/reject assignments over the same papers.
///
/// Jaccard of two empty accepted sets is 1.
pub fn agreement(a: &BTreeMap<String, bool>, b: &BTreeMap<String, bool>) -> Result<AgreementReport, AnalysisError> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(AnalysisError::PaperSetMismatch);
    }
    let n = a.len();
    if n == 0 {
        return Err(AnalysisError::NoArtifacts);
    }
    let (mut both, mut either, mut agree, mut acc_a, mut acc_b) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (id, &x) in a {
        let y = b[id];
        both += (x && y) as usize;
        either += (x || y) as usize;
        agree += (x == y) as usize;
        acc_a += x as usize;
        acc_b += y as usize;
    }
    let nf = n as f64;
    let po = agree as f64 / nf;
    let (pa, pb) = (acc_a as f64 / nf, acc_b as f64 / nf);
    let pe = pa * pb + (1.0 - pa) * (1.0 - pb);
    let kappa = if pe == 1.0 { 1.0 } else { (po - pe) / (1.0 - pe) };
    let percent_agree = 100.0 * po;
    Ok(AgreementReport {
        jaccard: if either == 0 { 1.0 } else { both as f64 / either as f64 },
        kappa,
        percent_agree,
        decision_change: decision_change(percent_agree),
        papers: n,
    })
}

pub fn decision_map(states: &[PaperSimState]) -> Result<BTreeMap<String, bool>, AnalysisError> {
    states
        .iter()
        .map(|s| {
            s.decision
                .as_ref()
                .map(|d: &PaperDecision| (s.paper_id.clone(), d.accept))
                .ok_or_else(|| AnalysisError::MissingDecision(s.paper_id.clone()))
        })
        .collect()
}

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.25;
pub const HISTOGRAM_BINS: usize = 36;

/// Left-closed bins of width 0.25 over [1, 10]; 10 falls in the last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Default for Histogram {
    fn default() -> Self {
        Self {
            counts: vec![0; HISTOGRAM_BINS],
        }
    }
}

impl Histogram {
    pub fn bin_of(rating: f64) -> usize {
        let i = ((rating - 1.0) / HISTOGRAM_BIN_WIDTH + 1e-9).floor();
        (i.max(0.0) as usize).min(HISTOGRAM_BINS - 1)
    }

    pub fn bin_bounds(i: usize) -> (f64, f64) {
        let lo = 1.0 + i as f64 * HISTOGRAM_BIN_WIDTH;
        (lo, lo + HISTOGRAM_BIN_WIDTH)
    }

    pub fn from_ratings(ratings: impl IntoIterator<Item = f64>) -> Self {
        let mut h = Self::default();
        for r in ratings {
            h.counts[Self::bin_of(r)] += 1;
        }
        h
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn rating_histogram(states: &[PaperSimState], phase: RatingPhase) -> Histogram {
    Histogram::from_ratings(states.iter().flat_map(|s| phase.ratings(s)))
}

/// Text artifacts whose lengths are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    Review,
    Rebuttal,
    UpdatedReview,
    MetaReview,
}

impl TextKind {
    pub const ALL: [TextKind; 4] = [TextKind::Review, TextKind::Rebuttal, TextKind::UpdatedReview, TextKind::MetaReview];

    pub fn as_str(self) -> &'static str {
        match self {
            TextKind::Review => "review",
            TextKind::Rebuttal => "rebuttal",
            TextKind::UpdatedReview => "updated_review",
            TextKind::MetaReview => "meta_review",
        }
    }
}

pub fn word_counts(states: &[PaperSimState], kind: TextKind) -> Vec<usize> {
    states
        .iter()
        .flat_map(|s| -> Vec<usize> {
            match kind {
                TextKind::Review => s.phase1_reviews.iter().map(|r| r.word_count).collect(),
                TextKind::Rebuttal => s.phase2_rebuttals.iter().map(|r| r.word_count).collect(),
                TextKind::UpdatedReview => s.phase3_updated.iter().map(|r| r.word_count).collect(),
                TextKind::MetaReview => vec![s.phase4_metareview.word_count],
            }
        })
        .collect()
}

/// Mean and sample std of word counts of one artifact kind.
pub fn word_count_stats(states: &[PaperSimState], kind: TextKind) -> Result<(f64, f64), AnalysisError> {
    let counts: Vec<f64> = word_counts(states, kind).into_iter().map(|c| c as f64).collect();
    if counts.is_empty() {
        return Err(AnalysisError::NoArtifacts);
    }
    Ok(mean_std(&counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub per_paper: Vec<(String, f64)>,
    pub mean: f64,
    pub std: f64,
    pub final_reviews: bool,
}

const EMBED_CHUNK: usize = 32;

/// Cosine between each paper's concatenated reviews and its meta-review.
/// `final_reviews` picks post-discussion texts when a discussion happened.
pub fn review_metareview_similarity(
    states: &[PaperSimState],
    provider: &dyn ChatProvider,
    final_reviews: bool,
) -> Result<SimilarityReport, AnalysisError> {
    if states.is_empty() {
        return Err(AnalysisError::NoArtifacts);
    }
    let mut texts = Vec::with_capacity(states.len() * 2);
    for s in states {
        let reviews: Vec<&str> = if final_reviews && !s.phase3_updated.is_empty() {
            s.phase3_updated.iter().map(|u| u.text.as_str()).collect()
        } else {
            s.phase1_reviews.iter().map(|r| r.raw_text.as_str()).collect()
        };
        texts.push(reviews.join("\n\n"));
        texts.push(s.phase4_metareview.text.clone());
    }
    let mut vectors = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EMBED_CHUNK) {
        vectors.extend(provider.embed(chunk)?);
    }
    let per_paper: Vec<(String, f64)> = states
        .iter()
        .zip(vectors.chunks(2))
        .map(|(s, pair)| (s.paper_id.clone(), pair[0].cosine(&pair[1])))
        .collect();
    let values: Vec<f64> = per_paper.iter().map(|p| p.1).collect();
    let (mean, std) = mean_std(&values);
    Ok(SimilarityReport {
        per_paper,
        mean,
        std,
        final_reviews,
    })
}
