//! Five-phase review simulation.
//!
//! Per paper: I initial reviews, II author rebuttals, III area-chair-led
//! discussion, IV meta-review. Papers run on a bounded worker pool; once
//! every paper has its meta-review, V decides each batch of `batch_size`
//! papers (sorted by id) under a fixed acceptance quota.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{assemble_manuscript_text, Corpus, PaperRecord, DEFAULT_MAX_CHARS};
use crate::documents::{
    parse_accepted_ids, parse_meta_review, parse_rebuttal, parse_review, parse_updated_review,
    DiscussionTurn, MetaReview, PaperDecision, ParseError, RebuttalDocument, ReviewDocument,
    Speaker, UpdatedReview,
};
use crate::experiments::ReusePlan;
use crate::hashing::seeded_hash;
use crate::personas::{
    render_ac_prompt, render_author_prompt, render_reviewer_prompt, AcStyle, PhaseId,
    PromptFlags, PromptTemplateSet, ReviewerProfile, SlotBindings, TemplateError,
};
use crate::provider::{ChatProvider, ChatRequest, ProviderError};
use crate::store::{Artifact, ArtifactKind, RunHandle, StoreError, Usage};

pub const REVIEWERS: u8 = 3;
pub const DEFAULT_ACCEPTANCE_RATE: f64 = 0.32;
pub const DEFAULT_BATCH_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismFlags {
    pub rebuttal_enabled: bool,
    pub numeric_rating_enabled: bool,
}

impl Default for MechanismFlags {
    fn default() -> Self {
        Self {
            rebuttal_enabled: true,
            numeric_rating_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub reviewers: [ReviewerProfile; 3],
    pub ac: AcStyle,
    pub mechanism: MechanismFlags,
    pub identity_flagged_papers: BTreeSet<String>,
    /// The last `k` reviewers know the authors of flagged papers.
    pub identity_aware_reviewers: u8,
    pub acceptance_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub max_manuscript_chars: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            reviewers: [ReviewerProfile::baseline(); 3],
            ac: AcStyle::Baseline,
            mechanism: MechanismFlags::default(),
            identity_flagged_papers: BTreeSet::new(),
            identity_aware_reviewers: 0,
            acceptance_rate: DEFAULT_ACCEPTANCE_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            temperature: 0.7,
            max_manuscript_chars: DEFAULT_MAX_CHARS,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.acceptance_rate > 0.0 && self.acceptance_rate <= 1.0) {
            return bad("acceptance_rate must be in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.identity_aware_reviewers > REVIEWERS {
            return bad("identity_aware_reviewers must be at most 3");
        }
        if self.identity_aware_reviewers > 0 && self.identity_flagged_papers.is_empty() {
            return bad("identity-aware reviewers need at least one flagged paper");
        }
        if self.max_manuscript_chars == 0 {
            return bad("max_manuscript_chars must be positive");
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be non-negative");
        }
        Ok(())
    }

    /// Profile of reviewer `j` (1-based) with identity awareness applied.
    pub fn reviewer(&self, j: u8) -> ReviewerProfile {
        let mut p = self.reviewers[(j - 1) as usize];
        p.knows_author_identity |= j > REVIEWERS - self.identity_aware_reviewers;
        p
    }

    /// Whether reviewer `j` sees the identity notice on `paper_id`.
    pub fn identity_notice_shown(&self, paper_id: &str, j: u8) -> bool {
        self.reviewer(j).knows_author_identity && self.identity_flagged_papers.contains(paper_id)
    }
}

/// Execution knobs that do not change artifact content.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub workers: usize,
    pub capture_prompts: bool,
    pub format_retries: u32,
    pub max_tokens: u32,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            workers: 4,
            capture_prompts: false,
            format_retries: 2,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("paper {paper_id}, {phase}, {role}: {source}")]
    Provider {
        paper_id: String,
        phase: PhaseId,
        role: String,
        #[source]
        source: ProviderError,
    },
    #[error("paper {paper_id}, {phase}, {role}: unparseable output after retries: {source}")]
    ParseFailure {
        paper_id: String,
        phase: PhaseId,
        role: String,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("stored artifact {0} has unexpected fields: {1}")]
    BadArtifact(String, String),
}

impl PipelineError {
    pub fn provider_error(&self) -> Option<&ProviderError> {
        match self {
            PipelineError::Provider { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperSimState {
    pub paper_id: String,
    pub phase1_reviews: Vec<ReviewDocument>,
    pub phase2_rebuttals: Vec<RebuttalDocument>,
    pub phase3_transcript: Vec<DiscussionTurn>,
    pub phase3_updated: Vec<UpdatedReview>,
    pub phase4_metareview: MetaReview,
    pub decision: Option<PaperDecision>,
}

impl PaperSimState {
    /// Post-discussion ratings, or the initial ones when there was no discussion.
    pub fn final_ratings(&self) -> Vec<Option<f64>> {
        if self.phase3_updated.is_empty() {
            self.phase1_reviews.iter().map(|r| r.rating).collect()
        } else {
            self.phase3_updated.iter().map(|r| r.rating).collect()
        }
    }

    pub fn initial_ratings(&self) -> Vec<Option<f64>> {
        self.phase1_reviews.iter().map(|r| r.rating).collect()
    }

    pub fn check_invariants(&self, mechanism: MechanismFlags) -> Result<(), String> {
        if self.phase1_reviews.len() != REVIEWERS as usize {
            return Err(format!("{}: expected 3 reviews", self.paper_id));
        }
        if mechanism.rebuttal_enabled {
            if self.phase2_rebuttals.len() != 3 || self.phase3_updated.len() != 3 || self.phase3_transcript.len() != 4 {
                return Err(format!("{}: incomplete rebuttal/discussion phases", self.paper_id));
            }
        } else if !self.phase2_rebuttals.is_empty() || !self.phase3_transcript.is_empty() || !self.phase3_updated.is_empty() {
            return Err(format!("{}: rebuttal artifacts in a no-rebuttal run", self.paper_id));
        }
        let ratings = self
            .phase1_reviews
            .iter()
            .map(|r| r.rating)
            .chain(self.phase3_updated.iter().map(|r| r.rating))
            .chain([self.phase4_metareview.rating]);
        for r in ratings {
            match (mechanism.numeric_rating_enabled, r) {
                (true, Some(v)) if (1.0..=10.0).contains(&v) => {}
                (true, _) => return Err(format!("{}: missing or out-of-range rating", self.paper_id)),
                (false, Some(_)) => return Err(format!("{}: rating present with numeric ratings off", self.paper_id)),
                (false, None) => {}
            }
        }
        Ok(())
    }
}

/// Phase V record persisted for each paper of a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub decision: PaperDecision,
    pub quota: usize,
    pub batch: Vec<String>,
    pub accepted: Vec<String>,
    /// Set when the area chair's answer was unusable and the deterministic ranking decided.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TranscriptFields {
    turns: Vec<DiscussionTurn>,
}

/// A parsed completion and what it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated<T> {
    pub doc: T,
    pub raw: String,
    pub usage: Usage,
}

pub fn round_half_up(x: f64) -> u64 {
    (x + 0.5 + 1e-9).floor().max(0.0) as u64
}

/// Accepts for a batch of `size` papers preceded by `prior` papers.
pub fn quota_for_range(prior: usize, size: usize, rate: f64) -> usize {
    (round_half_up(rate * (prior + size) as f64) - round_half_up(rate * prior as f64)) as usize
}

/// Accepts for the 1-based batch `i` of a run with full batches of `batch_size`.
pub fn quota_for_batch(i: usize, batch_size: usize, rate: f64) -> usize {
    assert!(i >= 1, "batch indices start at 1");
    quota_for_range(batch_size * (i - 1), batch_size, rate)
}

/// Sorted ids chunked into consecutive batches, numbered from 1.
pub fn batches(ids: &[String], batch_size: usize) -> Vec<(usize, Vec<String>)> {
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted
        .chunks(batch_size.max(1))
        .enumerate()
        .map(|(i, c)| (i + 1, c.to_vec()))
        .collect()
}

/// Deterministic Phase V ranking used when the area chair's answer is unusable.
///
/// With numeric ratings: score descending, ties by `seeded_hash(seed, [id, "phase5"])`
/// ascending. Without: `seeded_hash(seed, [meta-review text])` ascending.
/// Remaining ties go to the smaller id.
pub fn fallback_ranking(batch: &[(String, MetaReview)], numeric: bool, seed: u64) -> Vec<String> {
    let mut keyed: Vec<(f64, u64, &str)> = batch
        .iter()
        .map(|(id, meta)| {
            if numeric {
                (meta.rating.unwrap_or(0.0), seeded_hash(seed, &[id, "phase5"]), id.as_str())
            } else {
                (0.0, seeded_hash(seed, &[meta.text.trim()]), id.as_str())
            }
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(b.2)));
    keyed.into_iter().map(|k| k.2.to_string()).collect()
}

pub fn format_reviews(reviews: &[ReviewDocument]) -> String {
    if reviews.is_empty() {
        return String::new();
    }
    let body: Vec<String> = reviews
        .iter()
        .map(|r| format!("Review by Reviewer {}:\n{}", r.reviewer_index, r.raw_text.trim_end()))
        .collect();
    format!("=== REVIEWS ===\n{}\n=== END OF REVIEWS ===", body.join("\n\n"))
}

pub fn format_rebuttals(rebuttals: &[RebuttalDocument]) -> String {
    if rebuttals.is_empty() {
        return String::new();
    }
    let body: Vec<String> = rebuttals
        .iter()
        .map(|r| format!("Rebuttal to Reviewer {}:\n{}", r.reviewer_index, r.text.trim_end()))
        .collect();
    format!("=== AUTHOR REBUTTALS ===\n{}\n=== END OF AUTHOR REBUTTALS ===", body.join("\n\n"))
}

pub fn format_discussion(turns: &[DiscussionTurn]) -> String {
    if turns.is_empty() {
        return String::new();
    }
    let body: Vec<String> = turns
        .iter()
        .map(|t| {
            let who = match t.speaker {
                Speaker::AreaChair => "Area chair".to_string(),
                Speaker::Reviewer(i) => format!("Reviewer {i}"),
            };
            format!("{who}:\n{}", t.text.trim_end())
        })
        .collect();
    format!("=== DISCUSSION ===\n{}\n=== END OF DISCUSSION ===", body.join("\n\n"))
}

pub fn format_metareviews(batch: &[(String, MetaReview)]) -> String {
    batch
        .iter()
        .map(|(id, m)| format!("--- Paper {id} ---\n{}", m.text.trim_end()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Baseline run and plan consulted before generating an artifact.
#[derive(Clone, Copy)]
pub struct ReuseSource<'a> {
    pub baseline: &'a RunHandle,
    pub plan: &'a ReusePlan,
}

/// Output of one Phase V batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDecision {
    pub batch_index: usize,
    pub quota: usize,
    pub accepted: Vec<String>,
    pub decisions: Vec<PaperDecision>,
    pub raw: String,
    pub fallback: bool,
    pub usage: Usage,
}

/// A configured simulation bound to a provider and, optionally, a run.
pub struct Simulation<'a> {
    pub config: &'a SimulationConfig,
    pub templates: &'a PromptTemplateSet,
    pub provider: &'a dyn ChatProvider,
    pub options: PipelineOptions,
    pub run: Option<&'a RunHandle>,
    pub reuse: Option<ReuseSource<'a>>,
}

struct Role {
    paper_id: String,
    phase: PhaseId,
    name: String,
}

impl<'a> Simulation<'a> {
    pub fn new(config: &'a SimulationConfig, templates: &'a PromptTemplateSet, provider: &'a dyn ChatProvider) -> Self {
        Self {
            config,
            templates,
            provider,
            options: PipelineOptions::default(),
            run: None,
            reuse: None,
        }
    }

    pub fn with_options(mut self, options: PipelineOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_run(mut self, run: &'a RunHandle) -> Self {
        self.run = Some(run);
        self
    }

    pub fn with_reuse(mut self, reuse: Option<ReuseSource<'a>>) -> Self {
        self.reuse = reuse;
        self
    }

    fn numeric(&self) -> bool {
        self.config.mechanism.numeric_rating_enabled
    }

    fn request(&self, system_role: &str, prompt: String, tag: String) -> Result<ChatRequest, PipelineError> {
        let mut req = ChatRequest::new(self.templates.system_prompt(system_role)?, prompt, tag);
        req.temperature = self.config.temperature;
        req.max_tokens = self.options.max_tokens;
        Ok(req)
    }

    fn capture(&self, paper_id: &str, name: &str, request: &ChatRequest) -> Result<(), PipelineError> {
        if let (Some(run), true) = (self.run, self.options.capture_prompts) {
            run.save_prompt(paper_id, name, &request.transcript())?;
        }
        Ok(())
    }

    fn complete_parsed<T>(
        &self,
        request: ChatRequest,
        role: &Role,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<(Generated<T>, ChatRequest), PipelineError> {
        let mut request = request;
        let mut usage = Usage::default();
        let mut attempt = 0;
        loop {
            let response = self.provider.complete(&request).map_err(|source| PipelineError::Provider {
                paper_id: role.paper_id.clone(),
                phase: role.phase,
                role: role.name.clone(),
                source,
            })?;
            usage.add(Usage {
                calls: 1,
                prompt_tokens: response.prompt_tokens,
                completion_tokens: response.completion_tokens,
            });
            match parse(&response.text) {
                Ok(doc) => {
                    return Ok((
                        Generated {
                            doc,
                            raw: response.text,
                            usage,
                        },
                        request,
                    ))
                }
                Err(e) if attempt < self.options.format_retries => {
                    log::warn!("{} {} {}: re-prompting after parse error: {e}", role.paper_id, role.phase, role.name);
                    let correction = format!(
                        "Your answer could not be processed ({e}). Please answer again, following the required format exactly."
                    );
                    request = request.with_retry_turns(&response.text, &correction);
                    attempt += 1;
                }
                Err(source) => {
                    return Err(PipelineError::ParseFailure {
                        paper_id: role.paper_id.clone(),
                        phase: role.phase,
                        role: role.name.clone(),
                        source,
                    })
                }
            }
        }
    }

    fn manuscript(&self, paper: &PaperRecord) -> String {
        assemble_manuscript_text(paper, self.config.max_manuscript_chars)
    }

    /// Phase I review by reviewer `j`. The prompt holds the manuscript and
    /// this reviewer's persona only.
    pub fn review(&self, paper: &PaperRecord, j: u8) -> Result<Generated<ReviewDocument>, PipelineError> {
        let context = SlotBindings::new()
            .bind("paper_id", paper.id.as_str())
            .bind("reviewer_index", j.to_string())
            .bind("manuscript", self.manuscript(paper));
        let flags = PromptFlags {
            numeric_rating: self.numeric(),
            identity_flagged: self.config.identity_flagged_papers.contains(&paper.id),
        };
        let prompt = render_reviewer_prompt(self.templates, &self.config.reviewer(j), PhaseId::I, flags, &context)?;
        let request = self.request("reviewer", prompt, format!("{}/phase1/reviewer{j}", paper.id))?;
        let numeric = self.numeric();
        let role = Role {
            paper_id: paper.id.clone(),
            phase: PhaseId::I,
            name: format!("reviewer {j}"),
        };
        let (out, request) = self.complete_parsed(request, &role, |raw| {
            let mut doc = parse_review(raw, j, numeric)?;
            if !numeric {
                doc.rating = None;
            }
            Ok(doc)
        })?;
        self.capture(&paper.id, &format!("phase1_review_{j}"), &request)?;
        Ok(out)
    }

    pub fn run_phase1(&self, paper: &PaperRecord) -> Result<Vec<ReviewDocument>, PipelineError> {
        (1..=REVIEWERS).map(|j| self.review(paper, j).map(|g| g.doc)).collect()
    }

    /// Phase II rebuttal to one review; the prompt embeds that review only.
    pub fn rebuttal(&self, paper: &PaperRecord, review: &ReviewDocument) -> Result<Generated<RebuttalDocument>, PipelineError> {
        let j = review.reviewer_index;
        let prompt = render_author_prompt(self.templates, &paper.id, &self.manuscript(paper), review)?;
        let request = self.request("author", prompt, format!("{}/phase2/author{j}", paper.id))?;
        let role = Role {
            paper_id: paper.id.clone(),
            phase: PhaseId::II,
            name: format!("author to reviewer {j}"),
        };
        let (out, request) = self.complete_parsed(request, &role, |raw| parse_rebuttal(raw, j))?;
        self.capture(&paper.id, &format!("phase2_rebuttal_{j}"), &request)?;
        Ok(out)
    }

    pub fn run_phase2(&self, paper: &PaperRecord, reviews: &[ReviewDocument]) -> Result<Vec<RebuttalDocument>, PipelineError> {
        reviews.iter().map(|r| self.rebuttal(paper, r).map(|g| g.doc)).collect()
    }

    /// Phase III: the area chair opens, then reviewers 1..3 post one turn
    /// each. A reviewer's turn is its updated review.
    pub fn discussion(
        &self,
        paper: &PaperRecord,
        reviews: &[ReviewDocument],
        rebuttals: &[RebuttalDocument],
    ) -> Result<(Generated<Vec<DiscussionTurn>>, Vec<Generated<UpdatedReview>>), PipelineError> {
        let all_reviews = format_reviews(reviews);
        let all_rebuttals = format_rebuttals(rebuttals);
        let opener_context = SlotBindings::new()
            .bind("paper_id", paper.id.as_str())
            .bind("all_reviews", all_reviews.as_str())
            .bind("rebuttals", all_rebuttals.as_str());
        let prompt = render_ac_prompt(self.templates, self.config.ac, PhaseId::III, self.numeric(), &opener_context)?;
        let request = self.request("ac", prompt, format!("{}/phase3/ac", paper.id))?;
        let role = Role {
            paper_id: paper.id.clone(),
            phase: PhaseId::III,
            name: "area chair".into(),
        };
        let (opener, request) = self.complete_parsed(request, &role, |raw| {
            if raw.trim().is_empty() {
                Err(ParseError::Empty)
            } else {
                Ok(raw.to_string())
            }
        })?;
        self.capture(&paper.id, "phase3_opener", &request)?;

        let mut turns = vec![DiscussionTurn {
            speaker: Speaker::AreaChair,
            text: opener.doc.clone(),
        }];
        let mut updated = Vec::with_capacity(reviews.len());
        let numeric = self.numeric();
        for review in reviews {
            let j = review.reviewer_index;
            let context = SlotBindings::new()
                .bind("paper_id", paper.id.as_str())
                .bind("reviewer_index", j.to_string())
                .bind("own_review", review.raw_text.trim_end())
                .bind("all_reviews", all_reviews.as_str())
                .bind("rebuttals", all_rebuttals.as_str())
                .bind("discussion", format_discussion(&turns));
            let flags = PromptFlags {
                numeric_rating: numeric,
                identity_flagged: self.config.identity_flagged_papers.contains(&paper.id),
            };
            let prompt = render_reviewer_prompt(self.templates, &self.config.reviewer(j), PhaseId::III, flags, &context)?;
            let request = self.request("reviewer", prompt, format!("{}/phase3/reviewer{j}", paper.id))?;
            let role = Role {
                paper_id: paper.id.clone(),
                phase: PhaseId::III,
                name: format!("reviewer {j}"),
            };
            let (turn, request) = self.complete_parsed(request, &role, |raw| parse_updated_review(raw, j, numeric))?;
            self.capture(&paper.id, &format!("phase3_reviewer_{j}"), &request)?;
            turns.push(DiscussionTurn {
                speaker: Speaker::Reviewer(j),
                text: turn.doc.text.clone(),
            });
            updated.push(turn);
        }
        Ok((
            Generated {
                doc: turns,
                raw: opener.raw,
                usage: opener.usage,
            },
            updated,
        ))
    }

    pub fn run_phase3(
        &self,
        paper: &PaperRecord,
        reviews: &[ReviewDocument],
        rebuttals: &[RebuttalDocument],
    ) -> Result<(Vec<DiscussionTurn>, Vec<UpdatedReview>), PipelineError> {
        let (transcript, updated) = self.discussion(paper, reviews, rebuttals)?;
        Ok((transcript.doc, updated.into_iter().map(|g| g.doc).collect()))
    }

    /// Phase IV. What the area chair sees depends on its style; the
    /// templates decide which of the bound blocks appear.
    pub fn meta_review(
        &self,
        paper: &PaperRecord,
        reviews: &[ReviewDocument],
        rebuttals: &[RebuttalDocument],
        transcript: &[DiscussionTurn],
    ) -> Result<Generated<MetaReview>, PipelineError> {
        let context = SlotBindings::new()
            .bind("paper_id", paper.id.as_str())
            .bind("manuscript", self.manuscript(paper))
            .bind("all_reviews", format_reviews(reviews))
            .bind("rebuttals", format_rebuttals(rebuttals))
            .bind("discussion", format_discussion(transcript));
        let prompt = render_ac_prompt(self.templates, self.config.ac, PhaseId::IV, self.numeric(), &context)?;
        let request = self.request("ac", prompt, format!("{}/phase4/ac", paper.id))?;
        let numeric = self.numeric();
        let role = Role {
            paper_id: paper.id.clone(),
            phase: PhaseId::IV,
            name: "area chair".into(),
        };
        let (out, request) = self.complete_parsed(request, &role, |raw| parse_meta_review(raw, numeric))?;
        self.capture(&paper.id, "phase4_metareview", &request)?;
        Ok(out)
    }

    pub fn run_phase4(&self, paper: &PaperRecord, state: &PaperSimState) -> Result<MetaReview, PipelineError> {
        self.meta_review(paper, &state.phase1_reviews, &state.phase2_rebuttals, &state.phase3_transcript)
            .map(|g| g.doc)
    }

    /// Phase V for one batch. Always returns exactly `quota` accepts; an
    /// unusable answer after the retry budget falls back to
    /// [`fallback_ranking`].
    pub fn run_phase5(
        &self,
        batch_index: usize,
        batch: &[(String, MetaReview)],
        quota: usize,
    ) -> Result<BatchDecision, PipelineError> {
        let context = SlotBindings::new()
            .bind("batch_index", batch_index.to_string())
            .bind("batch_size", batch.len().to_string())
            .bind("quota", quota.to_string())
            .bind("metareviews", format_metareviews(batch));
        let prompt = render_ac_prompt(self.templates, self.config.ac, PhaseId::V, self.numeric(), &context)?;
        let first_id = batch.first().map(|b| b.0.clone()).unwrap_or_default();
        let mut request = self.request("ac", prompt, format!("batch{batch_index}/phase5/ac"))?;
        let ids: BTreeSet<&str> = batch.iter().map(|b| b.0.as_str()).collect();
        let mut usage = Usage::default();
        let mut accepted = None;
        let mut raw = String::new();
        for attempt in 0..=self.options.format_retries {
            let response = self.provider.complete(&request).map_err(|source| PipelineError::Provider {
                paper_id: first_id.clone(),
                phase: PhaseId::V,
                role: format!("area chair, batch {batch_index}"),
                source,
            })?;
            usage.add(Usage {
                calls: 1,
                prompt_tokens: response.prompt_tokens,
                completion_tokens: response.completion_tokens,
            });
            raw = response.text;
            let problem = match parse_accepted_ids(&raw) {
                Err(e) => e.to_string(),
                Ok(list) => {
                    let distinct: BTreeSet<&str> = list.iter().map(String::as_str).collect();
                    if distinct.len() != list.len() {
                        "a paper is listed twice".to_string()
                    } else if let Some(x) = list.iter().find(|id| !ids.contains(id.as_str())) {
                        format!("{x} is not in this batch")
                    } else if list.len() != quota {
                        format!("{} papers accepted, exactly {quota} required", list.len())
                    } else {
                        accepted = Some(list);
                        break;
                    }
                }
            };
            if attempt < self.options.format_retries {
                log::warn!("batch {batch_index}: re-prompting area chair: {problem}");
                request = request.with_retry_turns(
                    &raw,
                    &format!("Your decision list is not usable ({problem}). Reply again and end with the \"Accepted:\" line listing exactly {quota} paper ids from this batch."),
                );
            }
        }
        for (id, _) in batch {
            self.capture(id, "phase5_decision", &request)?;
        }
        let fallback = accepted.is_none();
        let accepted = accepted.unwrap_or_else(|| {
            log::warn!("batch {batch_index}: falling back to deterministic ranking");
            fallback_ranking(batch, self.numeric(), self.config.seed)
                .into_iter()
                .take(quota)
                .collect()
        });
        let decisions = batch
            .iter()
            .map(|(id, _)| PaperDecision {
                paper_id: id.clone(),
                accept: accepted.contains(id),
                batch_index,
            })
            .collect();
        Ok(BatchDecision {
            batch_index,
            quota,
            accepted,
            decisions,
            raw,
            fallback,
            usage,
        })
    }

    fn reusable(&self, paper_id: &str, kind: ArtifactKind, index: Option<u8>) -> Option<&'a RunHandle> {
        let reuse = self.reuse?;
        (reuse.plan.reuses(paper_id, kind, index) && reuse.baseline.contains(paper_id, kind, index)).then_some(reuse.baseline)
    }

    /// Existing artifact, else a baseline link, else `generate` + write.
    fn obtain<T: DeserializeOwned>(
        &self,
        paper_id: &str,
        kind: ArtifactKind,
        index: Option<u8>,
        generate: impl FnOnce() -> Result<Artifact, PipelineError>,
    ) -> Result<T, PipelineError> {
        let Some(run) = self.run else {
            return fields(&generate()?);
        };
        if !run.contains(paper_id, kind, index) {
            if let Some(baseline) = self.reusable(paper_id, kind, index) {
                run.link_artifact(baseline, paper_id, kind, index)?;
            } else {
                run.put_artifact(&generate()?)?;
            }
        }
        let artifact = run
            .get_artifact(paper_id, kind, index)?
            .expect("artifact recorded above");
        fields(&artifact)
    }

    /// Phases I-IV for one paper, resuming from and writing to the run.
    pub fn run_paper(&self, paper: &PaperRecord) -> Result<PaperSimState, PipelineError> {
        let pid = paper.id.as_str();
        let mut reviews = Vec::with_capacity(3);
        for j in 1..=REVIEWERS {
            let review: ReviewDocument = self.obtain(pid, ArtifactKind::Phase1Review, Some(j), || {
                let g = self.review(paper, j)?;
                Ok(Artifact::new(ArtifactKind::Phase1Review, pid, Some(j), &g.doc, g.raw, g.usage))
            })?;
            reviews.push(review);
        }

        let mut rebuttals = Vec::new();
        let mut transcript = Vec::new();
        let mut updated = Vec::new();
        if self.config.mechanism.rebuttal_enabled {
            for review in &reviews {
                let j = review.reviewer_index;
                let rebuttal: RebuttalDocument = self.obtain(pid, ArtifactKind::Phase2Rebuttal, Some(j), || {
                    let g = self.rebuttal(paper, review)?;
                    Ok(Artifact::new(ArtifactKind::Phase2Rebuttal, pid, Some(j), &g.doc, g.raw, g.usage))
                })?;
                rebuttals.push(rebuttal);
            }
            (transcript, updated) = self.obtain_discussion(paper, &reviews, &rebuttals)?;
        }

        let meta: MetaReview = self.obtain(pid, ArtifactKind::Phase4Metareview, None, || {
            let g = self.meta_review(paper, &reviews, &rebuttals, &transcript)?;
            Ok(Artifact::new(ArtifactKind::Phase4Metareview, pid, None, &g.doc, g.raw, g.usage))
        })?;

        let decision = match self.run {
            Some(run) => run
                .get_artifact(pid, ArtifactKind::Decision, None)?
                .map(|a| fields::<DecisionRecord>(&a).map(|r| r.decision))
                .transpose()?,
            None => None,
        };

        Ok(PaperSimState {
            paper_id: paper.id.clone(),
            phase1_reviews: reviews,
            phase2_rebuttals: rebuttals,
            phase3_transcript: transcript,
            phase3_updated: updated,
            phase4_metareview: meta,
            decision,
        })
    }

    /// Phase III is kept or regenerated as a unit: the transcript is written
    /// last, so its presence marks a finished discussion.
    fn obtain_discussion(
        &self,
        paper: &PaperRecord,
        reviews: &[ReviewDocument],
        rebuttals: &[RebuttalDocument],
    ) -> Result<(Vec<DiscussionTurn>, Vec<UpdatedReview>), PipelineError> {
        let pid = paper.id.as_str();
        let all_kinds = || {
            std::iter::once((ArtifactKind::Phase3Transcript, None))
                .chain((1..=REVIEWERS).map(|j| (ArtifactKind::Phase3Updated, Some(j))))
        };
        let Some(run) = self.run else {
            return self.run_phase3(paper, reviews, rebuttals);
        };
        let complete = all_kinds().all(|(k, i)| run.contains(pid, k, i));
        if !complete {
            if let Some(baseline) = all_kinds()
                .map(|(k, i)| self.reusable(pid, k, i))
                .collect::<Option<Vec<_>>>()
                .and_then(|v| v.first().copied())
            {
                for (k, i) in all_kinds() {
                    run.link_artifact(baseline, pid, k, i)?;
                }
            } else {
                let (transcript, updated) = self.discussion(paper, reviews, rebuttals)?;
                for g in &updated {
                    let j = g.doc.reviewer_index;
                    run.put_artifact(&Artifact::new(ArtifactKind::Phase3Updated, pid, Some(j), &g.doc, g.raw.clone(), g.usage))?;
                }
                run.put_artifact(&Artifact::new(
                    ArtifactKind::Phase3Transcript,
                    pid,
                    None,
                    &TranscriptFields { turns: transcript.doc },
                    transcript.raw,
                    transcript.usage,
                ))?;
            }
        }
        let transcript: TranscriptFields = fields(&run.get_artifact(pid, ArtifactKind::Phase3Transcript, None)?.expect("written"))?;
        let mut updated = Vec::with_capacity(3);
        for j in 1..=REVIEWERS {
            updated.push(fields(&run.get_artifact(pid, ArtifactKind::Phase3Updated, Some(j))?.expect("written"))?);
        }
        Ok((transcript.turns, updated))
    }

    /// Phase V for a batch against the run: kept, linked or generated.
    fn decide_batch(&self, batch_index: usize, prior: usize, batch: &[(String, MetaReview)]) -> Result<Vec<PaperDecision>, PipelineError> {
        let run = self.run.expect("decide_batch needs a run");
        let present = batch.iter().all(|(id, _)| run.contains(id, ArtifactKind::Decision, None));
        if !present {
            let baseline = batch
                .iter()
                .map(|(id, _)| self.reusable(id, ArtifactKind::Decision, None))
                .collect::<Option<Vec<_>>>()
                .and_then(|v| v.first().copied());
            if let Some(baseline) = baseline {
                for (id, _) in batch {
                    run.link_artifact(baseline, id, ArtifactKind::Decision, None)?;
                }
            } else {
                let quota = quota_for_range(prior, batch.len(), self.config.acceptance_rate);
                let out = self.run_phase5(batch_index, batch, quota)?;
                let ids: Vec<String> = batch.iter().map(|b| b.0.clone()).collect();
                for (n, decision) in out.decisions.iter().enumerate() {
                    let record = DecisionRecord {
                        decision: decision.clone(),
                        quota,
                        batch: ids.clone(),
                        accepted: out.accepted.clone(),
                        fallback: out.fallback,
                    };
                    // Batch usage is attributed to the first paper only.
                    let usage = if n == 0 { out.usage } else { Usage::default() };
                    run.put_artifact(&Artifact::new(ArtifactKind::Decision, &decision.paper_id, None, &record, out.raw.clone(), usage))?;
                }
            }
        }
        batch
            .iter()
            .map(|(id, _)| {
                let a = run.get_artifact(id, ArtifactKind::Decision, None)?.expect("written");
                fields::<DecisionRecord>(&a).map(|r| r.decision)
            })
            .collect()
    }

    /// Runs every paper of `corpus` through all phases on the worker pool,
    /// then decides the batches. Requires a run.
    pub fn run_all(&self, corpus: &Corpus) -> Result<Vec<PaperSimState>, PipelineError> {
        self.config.validate()?;
        assert!(self.run.is_some(), "run_all needs a run handle");
        let papers = corpus.papers();
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let results: Mutex<BTreeMap<String, PaperSimState>> = Mutex::new(BTreeMap::new());
        let first_error: Mutex<Option<(usize, PipelineError)>> = Mutex::new(None);
        std::thread::scope(|s| {
            for _ in 0..self.options.workers.max(1) {
                s.spawn(|| loop {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(paper) = papers.get(i) else { break };
                    log::debug!("paper {} started", paper.id);
                    match self.run_paper(paper) {
                        Ok(state) => {
                            results.lock().expect("results lock").insert(paper.id.clone(), state);
                        }
                        Err(e) => {
                            stop.store(true, Ordering::SeqCst);
                            let mut slot = first_error.lock().expect("error lock");
                            if slot.as_ref().is_none_or(|(j, _)| i < *j) {
                                *slot = Some((i, e));
                            }
                            break;
                        }
                    }
                });
            }
        });
        if let Some((_, e)) = first_error.into_inner().expect("error lock") {
            return Err(e);
        }
        let mut states = results.into_inner().expect("results lock");

        let ids: Vec<String> = states.keys().cloned().collect();
        let mut prior = 0;
        for (batch_index, batch_ids) in batches(&ids, self.config.batch_size) {
            let batch: Vec<(String, MetaReview)> = batch_ids
                .iter()
                .map(|id| (id.clone(), states[id].phase4_metareview.clone()))
                .collect();
            for decision in self.decide_batch(batch_index, prior, &batch)? {
                let slot = states.get_mut(&decision.paper_id).expect("known paper");
                slot.decision = Some(decision);
            }
            prior += batch.len();
        }
        Ok(states.into_values().collect())
    }
}

fn fields<T: DeserializeOwned>(artifact: &Artifact) -> Result<T, PipelineError> {
    artifact.fields_as().map_err(|e| {
        PipelineError::BadArtifact(
            format!("{}/{}{}", artifact.paper_id, artifact.kind, artifact.index.map(|i| format!("_{i}")).unwrap_or_default()),
            e.to_string(),
        )
    })
}

/// Loads the final state of every paper in a finished run.
pub fn load_states(run: &RunHandle, paper_ids: &[String]) -> Result<Vec<PaperSimState>, PipelineError> {
    let mut out = Vec::with_capacity(paper_ids.len());
    for pid in paper_ids {
        let get = |kind: ArtifactKind, index: Option<u8>| run.get_artifact(pid, kind, index);
        let mut reviews = Vec::new();
        let mut rebuttals = Vec::new();
        let mut updated = Vec::new();
        for j in 1..=REVIEWERS {
            if let Some(a) = get(ArtifactKind::Phase1Review, Some(j))? {
                reviews.push(fields(&a)?);
            }
            if let Some(a) = get(ArtifactKind::Phase2Rebuttal, Some(j))? {
                rebuttals.push(fields(&a)?);
            }
            if let Some(a) = get(ArtifactKind::Phase3Updated, Some(j))? {
                updated.push(fields(&a)?);
            }
        }
        let transcript = match get(ArtifactKind::Phase3Transcript, None)? {
            Some(a) => fields::<TranscriptFields>(&a)?.turns,
            None => Vec::new(),
        };
        let meta = get(ArtifactKind::Phase4Metareview, None)?
            .ok_or_else(|| PipelineError::BadArtifact(format!("{pid}/phase4_metareview"), "missing".into()))?;
        let decision = get(ArtifactKind::Decision, None)?
            .map(|a| fields::<DecisionRecord>(&a).map(|r| r.decision))
            .transpose()?;
        out.push(PaperSimState {
            paper_id: pid.clone(),
            phase1_reviews: reviews,
            phase2_rebuttals: rebuttals,
            phase3_transcript: transcript,
            phase3_updated: updated,
            phase4_metareview: fields(&meta)?,
            decision,
        });
    }
    Ok(out)
}

/// A reviewer's authored text found somewhere it must not be visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityViolation {
    pub paper_id: String,
    pub prompt: String,
    pub leaked_reviewer: u8,
    pub excerpt: String,
}

pub const AUDIT_WINDOW: usize = 20;

/// First `width`-character window of `needle` that occurs in `haystack`.
pub fn shared_window(haystack: &str, needle: &str, width: usize) -> Option<String> {
    let chars: Vec<char> = needle.chars().collect();
    if chars.len() < width {
        return (!needle.is_empty() && haystack.contains(needle)).then(|| needle.to_string());
    }
    chars
        .windows(width)
        .map(|w| w.iter().collect::<String>())
        .find(|w| haystack.contains(w.as_str()))
}

/// Checks captured prompts of one paper: Phase I prompt `j` holds no
/// 20-character window of another reviewer's authored text, and rebuttal
/// prompt `j` embeds review `j` and nothing authored by the others.
pub fn audit_visibility(run: &RunHandle, paper_id: &str) -> Result<Vec<VisibilityViolation>, PipelineError> {
    let mut reviews: Vec<ReviewDocument> = Vec::new();
    for j in 1..=REVIEWERS {
        if let Some(a) = run.get_artifact(paper_id, ArtifactKind::Phase1Review, Some(j))? {
            reviews.push(fields(&a)?);
        }
    }
    let read = |name: &str| -> Result<Option<String>, PipelineError> {
        let path = run.prompt_path(paper_id, name);
        if !path.exists() {
            return Ok(None);
        }
        std::fs::read_to_string(&path)
            .map(Some)
            .map_err(|source| PipelineError::Store(StoreError::Io { path, source }))
    };
    let mut out = Vec::new();
    let scan = |prompt_name: &str, text: &str, own: u8| {
        let mut found = Vec::new();
        for other in reviews.iter().filter(|r| r.reviewer_index != own) {
            for fragment in other.authored_fragments() {
                if let Some(excerpt) = shared_window(text, fragment, AUDIT_WINDOW) {
                    found.push(VisibilityViolation {
                        paper_id: paper_id.to_string(),
                        prompt: prompt_name.to_string(),
                        leaked_reviewer: other.reviewer_index,
                        excerpt,
                    });
                    break;
                }
            }
        }
        found
    };
    for j in 1..=REVIEWERS {
        let name = format!("phase1_review_{j}");
        if let Some(text) = read(&name)? {
            out.extend(scan(&name, &text, j));
        }
        let name = format!("phase2_rebuttal_{j}");
        if let Some(text) = read(&name)? {
            let own = reviews.iter().find(|r| r.reviewer_index == j);
            let stripped = match own {
                Some(r) if text.contains(r.raw_text.trim_end()) => text.replacen(r.raw_text.trim_end(), "", 1),
                _ => {
                    out.push(VisibilityViolation {
                        paper_id: paper_id.to_string(),
                        prompt: name.clone(),
                        leaked_reviewer: j,
                        excerpt: "own review missing from rebuttal prompt".into(),
                    });
                    text.clone()
                }
            };
            out.extend(scan(&name, &stripped, j));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic_corpus, DecisionCategory};
    use crate::provider::MockProvider;

    fn corpus(n: usize) -> Corpus {
        synthetic_corpus(&[(DecisionCategory::Reject, n)], 3)
    }

    #[test]
    fn quotas_hand_computed() {
        // 3.2 -> 3, 6.4 -> 6, 9.6 -> 10, 12.8 -> 13, 16 -> 16.
        let q: Vec<usize> = (1..=5).map(|i| quota_for_batch(i, 10, 0.32)).collect();
        assert_eq!(q, vec![3, 3, 4, 3, 3]);
        assert_eq!((1..=4).map(|i| quota_for_batch(i, 10, 1.0)).collect::<Vec<_>>(), vec![10; 4]);
        assert_eq!(quota_for_range(50, 3, 0.32), 1);
    }

    #[test]
    fn batches_are_sorted_chunks() {
        let ids: Vec<String> = ["c", "a", "e", "b", "d"].iter().map(|s| s.to_string()).collect();
        let b = batches(&ids, 2);
        assert_eq!(b.len(), 3);
        assert_eq!(b[0], (1, vec!["a".to_string(), "b".to_string()]));
        assert_eq!(b[2], (3, vec!["e".to_string()]));
    }

    #[test]
    fn config_validation() {
        let mut c = SimulationConfig::default();
        assert!(c.validate().is_ok());
        c.identity_aware_reviewers = 1;
        assert!(c.validate().is_err());
        c.identity_flagged_papers.insert("p".into());
        assert!(c.validate().is_ok());
        assert!(!c.reviewer(2).knows_author_identity);
        assert!(c.reviewer(3).knows_author_identity);
        c.acceptance_rate = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let mut c = SimulationConfig::default();
        c.reviewers[2] = ReviewerProfile::baseline().with_trait("malicious").unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<SimulationConfig>(&text).unwrap(), c);
        let partial: SimulationConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.batch_size, 10);
    }

    #[test]
    fn phase3_transcript_has_opener_and_three_turns() {
        let corpus = corpus(1);
        let paper = &corpus.papers()[0];
        let config = SimulationConfig::default();
        let templates = PromptTemplateSet::builtin();
        let mock = MockProvider::new(1);
        let sim = Simulation::new(&config, &templates, &mock);
        let reviews = sim.run_phase1(paper).unwrap();
        let rebuttals = sim.run_phase2(paper, &reviews).unwrap();
        let (transcript, updated) = sim.run_phase3(paper, &reviews, &rebuttals).unwrap();
        assert_eq!(transcript.len(), 4);
        assert_eq!(transcript[0].speaker, Speaker::AreaChair);
        assert!(updated.iter().all(|u| u.rating.is_some()));
    }

    #[test]
    fn fallback_orders_by_score_then_hash() {
        let meta = |r: f64| MetaReview {
            rating: Some(r),
            text: format!("Score: {r}"),
            word_count: 2,
        };
        let batch = vec![("a".to_string(), meta(4.0)), ("b".to_string(), meta(7.0)), ("c".to_string(), meta(5.5))];
        assert_eq!(fallback_ranking(&batch, true, 0), vec!["b", "c", "a"]);
    }

    #[test]
    fn shared_window_finds_overlap() {
        assert_eq!(shared_window("xx abcdefghijklmnopqrst yy", "0abcdefghijklmnopqrst", 20).as_deref(), Some("abcdefghijklmnopqrst"));
        assert_eq!(shared_window("short", "other text entirely here", 20), None);
    }
}
