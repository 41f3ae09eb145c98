//! Deterministic offline backend.
//!
//! The mock reads the structural markers that the shipped templates and the
//! pipeline put into every prompt (`### Task: ...`, `Paper ID:`, persona
//! lines, `=== ... ===` blocks) and writes a valid document for that phase.
//! Output is a pure function of the request text and the seed. The exact
//! rules are listed in `docs/mock-backend.md`.

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use regex::Regex;

use super::{ChatProvider, ChatRequest, ChatResponse, EmbeddingVector, ProviderError, ProviderIdentity};
use crate::documents::{self, count_words, format_rating, parse_review, ReviewDocument};
use crate::hashing::seeded_hash;

pub const MOCK_MODEL: &str = "mock-v1";
pub const MOCK_EMBEDDING_DIM: usize = 64;

pub(crate) const TASK_INITIAL_REVIEW: &str = "### Task: initial review";
pub(crate) const TASK_REBUTTAL: &str = "### Task: author rebuttal";
pub(crate) const TASK_DISCUSSION_OPENING: &str = "### Task: discussion opening";
pub(crate) const TASK_REVIEWER_DISCUSSION: &str = "### Task: reviewer discussion";
pub(crate) const TASK_META_REVIEW: &str = "### Task: meta-review";
pub(crate) const TASK_FINAL_DECISIONS: &str = "### Task: final decisions";
pub(crate) const TASK_CATEGORIZE: &str = "### Task: reason categorization";

const REVIEWER_RATING_MARKER: &str = "Rate the paper on a scale from 1 to 10";
const AC_RATING_MARKER: &str = "score from 1 to 10";
const IDENTITY_MARKER: &str = "renowned and highly accomplished";

/// Offline provider with per-task call accounting.
#[derive(Debug, Default)]
pub struct MockProvider {
    seed: u64,
    calls: Mutex<BTreeMap<String, u64>>,
}

impl MockProvider {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            calls: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Completions served for a task name such as `"initial review"`.
    pub fn calls(&self, task: &str) -> u64 {
        self.calls.lock().expect("mock lock").get(task).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> u64 {
        self.calls.lock().expect("mock lock").values().sum()
    }

    pub fn call_counts(&self) -> BTreeMap<String, u64> {
        self.calls.lock().expect("mock lock").clone()
    }
}

impl ChatProvider for MockProvider {
    fn identity(&self) -> ProviderIdentity {
        ProviderIdentity {
            backend: "mock".into(),
            model: MOCK_MODEL.into(),
        }
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        let response = mock_complete(request, self.seed)?;
        let task = Task::detect(request.prompt()).expect("mock_complete succeeded");
        *self.calls.lock().expect("mock lock").entry(task.name().to_string()).or_default() += 1;
        Ok(response)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::InvalidRequest("no texts to embed".into()));
        }
        *self.calls.lock().expect("mock lock").entry("embedding".into()).or_default() += texts.len() as u64;
        Ok(texts.iter().map(|t| mock_embedding(t, self.seed)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    InitialReview,
    Rebuttal,
    DiscussionOpening,
    ReviewerDiscussion,
    MetaReview,
    FinalDecisions,
    Categorize,
}

impl Task {
    fn detect(prompt: &str) -> Option<Task> {
        [
            (TASK_INITIAL_REVIEW, Task::InitialReview),
            (TASK_REBUTTAL, Task::Rebuttal),
            (TASK_DISCUSSION_OPENING, Task::DiscussionOpening),
            (TASK_REVIEWER_DISCUSSION, Task::ReviewerDiscussion),
            (TASK_META_REVIEW, Task::MetaReview),
            (TASK_FINAL_DECISIONS, Task::FinalDecisions),
            (TASK_CATEGORIZE, Task::Categorize),
        ]
        .into_iter()
        .find(|(marker, _)| prompt.contains(marker))
        .map(|(_, t)| t)
    }

    fn name(self) -> &'static str {
        match self {
            Task::InitialReview => "initial review",
            Task::Rebuttal => "author rebuttal",
            Task::DiscussionOpening => "discussion opening",
            Task::ReviewerDiscussion => "reviewer discussion",
            Task::MetaReview => "meta-review",
            Task::FinalDecisions => "final decisions",
            Task::Categorize => "reason categorization",
        }
    }
}

/// Rating offset for the persona markers present in a prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Persona {
    responsible: bool,
    irresponsible: bool,
    benign: bool,
    malicious: bool,
    knowledgeable: bool,
    unknowledgeable: bool,
    renowned: bool,
}

impl Persona {
    fn detect(prompt: &str) -> Self {
        let has = |t: &str| prompt.contains(&format!("Reviewer persona: {t}."));
        Self {
            responsible: has("responsible"),
            irresponsible: has("irresponsible"),
            benign: has("benign"),
            malicious: has("malicious"),
            knowledgeable: has("knowledgeable"),
            unknowledgeable: has("unknowledgeable"),
            renowned: prompt.contains(IDENTITY_MARKER),
        }
    }

    fn shift(&self) -> f64 {
        let mut s = 0.0;
        if self.malicious {
            s -= 2.0;
        }
        if self.irresponsible {
            s -= 1.0;
        }
        if self.unknowledgeable {
            s -= 0.5;
        }
        if self.renowned {
            s += 0.5;
        }
        s
    }

    fn rich(&self) -> bool {
        self.responsible || self.knowledgeable || self.benign
    }
}

/// `clamp(5 + shift + (h mod 5 - 2) * 0.5, 1, 10)`.
pub(crate) fn initial_rating(h: u64, shift: f64) -> f64 {
    let jitter = ((h % 5) as f64 - 2.0) * 0.5;
    (5.0 + shift + jitter).clamp(1.0, 10.0)
}

/// Conformity nudge: a quarter point toward the mean of the initial ratings.
pub(crate) fn nudged_rating(own: f64, all: &[f64]) -> f64 {
    if all.is_empty() {
        return own;
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let next = if mean - own > 0.125 {
        own + 0.25
    } else if own - mean > 0.125 {
        own - 0.25
    } else {
        own
    };
    next.clamp(1.0, 10.0)
}

fn round_quarter(x: f64) -> f64 {
    ((x * 4.0).round() / 4.0).clamp(1.0, 10.0)
}

/// Bag-of-words feature hashing into 64 dimensions, then unit-normalized.
///
/// Each token (lowercased, trimmed of non-alphanumerics) contributes ±1 to
/// dimension `h mod 64`, sign from bit 63 of `h`, where
/// `h = seeded_hash(seed, ["embed", token])`. Texts without tokens (or
/// whose contributions cancel) map to the first basis vector.
pub fn mock_embedding(text: &str, seed: u64) -> EmbeddingVector {
    let mut values = vec![0.0f64; MOCK_EMBEDDING_DIM];
    for raw in text.split_whitespace() {
        let token: String = raw
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase();
        if token.is_empty() {
            continue;
        }
        let h = seeded_hash(seed, &["embed", &token]);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        values[(h % MOCK_EMBEDDING_DIM as u64) as usize] += sign;
    }
    EmbeddingVector::new(values).unwrap_or_else(|_| {
        let mut basis = vec![0.0; MOCK_EMBEDDING_DIM];
        basis[0] = 1.0;
        EmbeddingVector::new(basis).expect("unit basis vector")
    })
}

/// Completes `request` deterministically.
pub fn mock_complete(request: &ChatRequest, seed: u64) -> Result<ChatResponse, ProviderError> {
    let prompt = request.prompt();
    let task = Task::detect(prompt).ok_or(ProviderError::UnrecognizedPromptShape)?;
    let text = match task {
        Task::InitialReview => initial_review(prompt, seed)?,
        Task::Rebuttal => rebuttal(prompt, seed)?,
        Task::DiscussionOpening => discussion_opening(prompt)?,
        Task::ReviewerDiscussion => reviewer_discussion(prompt, seed)?,
        Task::MetaReview => meta_review(prompt, seed)?,
        Task::FinalDecisions => final_decisions(prompt, seed)?,
        Task::Categorize => categorize(prompt)?,
    };
    Ok(ChatResponse {
        prompt_tokens: count_words(&request.transcript()) as u64,
        completion_tokens: count_words(&text) as u64,
        text,
    })
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("valid regex"))
}

fn paper_id(prompt: &str) -> Result<&str, ProviderError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"(?m)^Paper ID: (\S+)")
        .captures(prompt)
        .map(|c| c.get(1).expect("group").as_str())
        .ok_or(ProviderError::UnrecognizedPromptShape)
}

fn reviewer_index(prompt: &str, pattern: &'static OnceLock<Regex>, src: &str) -> Result<u8, ProviderError> {
    re(pattern, src)
        .captures(prompt)
        .and_then(|c| c[1].parse().ok())
        .ok_or(ProviderError::UnrecognizedPromptShape)
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let to = text[from..].find(end)? + from;
    Some(&text[from..to])
}

/// Splits a block on heading lines, returning (captured label, body) pairs.
fn chunks<'a>(block: &'a str, heading: &Regex) -> Vec<(String, &'a str)> {
    let heads: Vec<_> = heading.captures_iter(block).collect();
    let mut out = Vec::with_capacity(heads.len());
    for (i, cap) in heads.iter().enumerate() {
        let whole = cap.get(0).expect("match");
        let end = heads.get(i + 1).map(|c| c.get(0).expect("match").start()).unwrap_or(block.len());
        out.push((cap[1].to_string(), &block[whole.end()..end]));
    }
    out
}

fn review_heading() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"(?m)^Review by Reviewer (\d+):[ \t]*$")
}

fn discussion_heading() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"(?m)^(Area chair|Reviewer \d+):[ \t]*$")
}

fn paper_heading() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"(?m)^--- Paper (\S+) ---[ \t]*$")
}

/// Parsed reviews found in the `=== REVIEWS ===` block, by reviewer index.
fn reviews_in(prompt: &str) -> BTreeMap<u8, ReviewDocument> {
    let Some(block) = between(prompt, "=== REVIEWS ===", "=== END OF REVIEWS ===") else {
        return BTreeMap::new();
    };
    chunks(block, review_heading())
        .into_iter()
        .filter_map(|(idx, body)| {
            let idx: u8 = idx.parse().ok()?;
            parse_review(body.trim(), idx, false).ok().map(|d| (idx, d))
        })
        .collect()
}

/// Latest rating per reviewer: discussion turns first, then initial reviews.
fn latest_ratings(prompt: &str) -> Vec<f64> {
    let initial: BTreeMap<u8, f64> = reviews_in(prompt)
        .into_iter()
        .filter_map(|(i, d)| d.rating.map(|r| (i, r)))
        .collect();
    let mut updated: BTreeMap<u8, f64> = BTreeMap::new();
    if let Some(block) = between(prompt, "=== DISCUSSION ===", "=== END OF DISCUSSION ===") {
        for (label, body) in chunks(block, discussion_heading()) {
            let Some(idx) = label.strip_prefix("Reviewer ").and_then(|s| s.parse::<u8>().ok()) else {
                continue;
            };
            if let Ok(Some(r)) = documents::extract_overall_rating(body) {
                updated.insert(idx, r);
            }
        }
    }
    initial
        .iter()
        .map(|(i, r)| updated.get(i).copied().unwrap_or(*r))
        .collect()
}

struct Picker<'a> {
    seed: u64,
    key: Vec<&'a str>,
}

impl<'a> Picker<'a> {
    /// Picks `count` distinct entries of `bank`, skipping those in `taken`.
    fn pick(&self, label: &str, bank: &[&'static str], count: usize, taken: &[&'static str]) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        let mut k = 0u32;
        while out.len() < count && out.len() + taken.len() < bank.len() + taken.len() {
            let kstr = k.to_string();
            let mut parts = self.key.clone();
            parts.push(label);
            parts.push(&kstr);
            let start = (seeded_hash(self.seed, &parts) % bank.len() as u64) as usize;
            let candidate = (0..bank.len())
                .map(|o| bank[(start + o) % bank.len()])
                .find(|c| !out.contains(c) && !taken.contains(c));
            match candidate {
                Some(c) => out.push(c),
                None => break,
            }
            k += 1;
        }
        out
    }
}

const SIGNIFICANCE: &[&str] = &[
    "The submission tackles a relevant question, and the proposed method could matter to the community.",
    "The work addresses a timely problem with a reasonably motivated approach.",
    "The study targets a problem of moderate importance; its contribution is mostly methodological.",
    "The manuscript proposes a sensible technique for a recognised open question.",
];
const SIGNIFICANCE_RICH: &[&str] = &[
    "I checked the derivations and the evaluation protocol in detail.",
    "The main technical step holds up, though its positioning against related methods deserves more care.",
    "If the claims hold more broadly, the contribution would be useful to practitioners and researchers alike.",
];
const SIGNIFICANCE_MALICIOUS: &str = "The claimed contribution is overstated and its significance is doubtful.";
const SIGNIFICANCE_TERSE: &[&str] = &["Interesting topic.", "Reasonable submission overall.", "Decent work."];

const ACCEPT: &[&str] = &[
    "The core idea is original and offers a fresh angle on a well-studied problem.",
    "Framing the task this way is novel and opens room for follow-up work.",
    "Results on the reported benchmarks are competitive with strong baselines.",
    "Experiments show consistent gains across the evaluated settings.",
    "The paper is well written and easy to follow.",
    "Figures make the mechanism clear at a glance.",
    "The approach has obvious practical value for downstream applications.",
    "Code is released, which makes the work easy to reproduce.",
    "Training details are thorough enough that others could reproduce the study.",
];

const REJECT_NOVELTY: &[&str] = &[
    "The contribution looks incremental; novelty over closely related prior work is limited.",
    "Novelty is marginal, since the core mechanism mirrors earlier published approaches.",
    "It is hard to see what is genuinely new here; the method appears derivative of existing techniques.",
];
const REJECT_PRESENTATION: &[&str] = &[
    "The presentation is uneven and several derivations are hard to follow.",
    "Notation changes between sections, which makes the method description unclear.",
    "The writing needs polishing; key definitions appear only in the appendix.",
];
const REJECT_LIMITATIONS: &[&str] = &[
    "There is little discussion of limitations or of settings where the approach breaks down.",
    "Failure modes are not analysed, so the boundaries of the method remain unknown.",
];
const REJECT_EXPERIMENTS: &[&str] = &[
    "The experimental evaluation covers too few datasets to support the general claims.",
    "Important baselines are missing from the comparison tables.",
    "An ablation isolating each component would strengthen the validation.",
];
const REJECT_OTHER: &[&str] = &[
    "Scalability to larger inputs is not demonstrated and the computational cost is not reported.",
    "Practical deployment seems difficult given the memory footprint of the approach.",
    "Some theoretical claims rest on assumptions that are stated without justification.",
    "The proof sketch skips steps whose correctness is not obvious.",
    "Implementation details such as hyperparameter choices are too sparse to reproduce the results.",
];

const SUGGESTIONS: &[&str] = &[
    "Add experiments on additional datasets, including out-of-distribution data.",
    "Include an ablation study of each component.",
    "Report runtime and memory alongside accuracy.",
    "Expand the discussion of limitations and failure cases.",
    "Clarify the notation in the method section and add pseudocode.",
    "Compare against more recent baselines.",
    "Release code and full hyperparameter settings.",
];

fn all_reject() -> Vec<&'static str> {
    [REJECT_NOVELTY, REJECT_PRESENTATION, REJECT_LIMITATIONS, REJECT_EXPERIMENTS, REJECT_OTHER].concat()
}

fn initial_review(prompt: &str, seed: u64) -> Result<String, ProviderError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let paper = paper_id(prompt)?;
    let reviewer = reviewer_index(prompt, &RE, r"(?m)^You are Reviewer (\d+)\.")?;
    let reviewer_s = reviewer.to_string();
    let persona = Persona::detect(prompt);
    let h = seeded_hash(seed, &[paper, &reviewer_s, "phase1"]);
    let rating = prompt
        .contains(REVIEWER_RATING_MARKER)
        .then(|| initial_rating(h, persona.shift()));
    let picker = Picker {
        seed,
        key: vec![paper, &reviewer_s, "phase1"],
    };

    let (n_accept, n_reject, n_suggest) = if persona.irresponsible {
        (1, 2, 1)
    } else if persona.rich() {
        (4, 4, 4)
    } else {
        (3, 3, 3)
    };
    let n_accept = if persona.malicious { 1 } else { n_accept };

    let significance = if persona.irresponsible {
        picker.pick("sig", SIGNIFICANCE_TERSE, 1, &[]).join(" ")
    } else {
        let mut s = if persona.malicious {
            vec![SIGNIFICANCE_MALICIOUS]
        } else {
            picker.pick("sig", SIGNIFICANCE, 1, &[])
        };
        if persona.rich() {
            s.extend(picker.pick("sig-rich", SIGNIFICANCE_RICH, 2, &[]));
        }
        s.join(" ")
    };

    let mut reject: Vec<&'static str> = Vec::new();
    if persona.malicious {
        reject.extend(picker.pick("rej-novelty", REJECT_NOVELTY, 2, &[]));
        reject.extend(picker.pick("rej-presentation", REJECT_PRESENTATION, 1, &[]));
    }
    if persona.unknowledgeable {
        reject.extend(picker.pick("rej-limitations", REJECT_LIMITATIONS, 1, &[]));
    }
    if persona.knowledgeable {
        reject.extend(picker.pick("rej-experiments", REJECT_EXPERIMENTS, 1, &[]));
    }
    let n_reject = n_reject.max(reject.len());
    let fill = picker.pick("rej", &all_reject(), n_reject - reject.len(), &reject);
    reject.extend(fill);

    let doc = ReviewDocument::new(
        reviewer,
        rating,
        significance,
        picker.pick("acc", ACCEPT, n_accept, &[]).into_iter().map(String::from).collect(),
        reject.into_iter().map(String::from).collect(),
        picker.pick("sug", SUGGESTIONS, n_suggest, &[]).into_iter().map(String::from).collect(),
    );
    Ok(doc.raw_text)
}

const REBUTTAL_ACTIONS: &[&str] = &[
    "adding the requested analysis to the revision",
    "expanding the relevant section with a dedicated paragraph",
    "clarifying the text and pointing to the supporting evidence",
    "reporting the additional comparison in the appendix",
];

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn rebuttal(prompt: &str, seed: u64) -> Result<String, ProviderError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let paper = paper_id(prompt)?;
    let reviewer = reviewer_index(prompt, &RE, r"(?m)^Responding to Reviewer (\d+)\.")?;
    let reviewer_s = reviewer.to_string();
    let review = between(prompt, "=== REVIEW ===", "=== END OF REVIEW ===")
        .ok_or(ProviderError::UnrecognizedPromptShape)?;
    let concerns = parse_review(review.trim(), reviewer, false)
        .map(|d| d.reasons_reject)
        .unwrap_or_default();
    let mut out = format!("We thank Reviewer {reviewer} for the careful reading of our submission and the constructive comments.");
    for (i, concern) in concerns.iter().enumerate() {
        let k = i.to_string();
        let action = REBUTTAL_ACTIONS
            [(seeded_hash(seed, &[paper, &reviewer_s, "phase2", &k]) % REBUTTAL_ACTIONS.len() as u64) as usize];
        out.push_str(&format!(
            "\n\nOn the point that {}: we agree this deserves attention and will address it by {action}.",
            lower_first(concern.trim_end_matches('.'))
        ));
    }
    out.push_str("\n\nWe hope these clarifications resolve the main concerns and are happy to discuss further.");
    Ok(out)
}

fn discussion_opening(prompt: &str) -> Result<String, ProviderError> {
    let paper = paper_id(prompt)?;
    let ratings: Vec<f64> = reviews_in(prompt).values().filter_map(|d| d.rating).collect();
    let mut out = format!(
        "Dear reviewers, the author rebuttals for paper {paper} are now available. Please read them together with the other reviews, reconsider your initial ratings, and post an updated review."
    );
    if let (Some(lo), Some(hi)) = (
        ratings.iter().copied().reduce(f64::min),
        ratings.iter().copied().reduce(f64::max),
    ) {
        out.push_str(&format!(
            " The initial ratings range from {} to {}.",
            format_rating(lo),
            format_rating(hi)
        ));
    }
    Ok(out)
}

fn reviewer_discussion(prompt: &str, seed: u64) -> Result<String, ProviderError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let paper = paper_id(prompt)?;
    let reviewer = reviewer_index(prompt, &RE, r"(?m)^You are Reviewer (\d+)\.")?;
    let persona = Persona::detect(prompt);
    let own_block = between(prompt, "=== YOUR INITIAL REVIEW ===", "=== END OF YOUR INITIAL REVIEW ===")
        .ok_or(ProviderError::UnrecognizedPromptShape)?;
    let own = parse_review(own_block.trim(), reviewer, false).ok();
    let numeric = prompt.contains(REVIEWER_RATING_MARKER);
    let all: Vec<f64> = reviews_in(prompt).values().filter_map(|d| d.rating).collect();

    let mut out = String::new();
    let mut verdict = "My overall assessment is unchanged.";
    if numeric {
        let own_rating = own
            .as_ref()
            .and_then(|d| d.rating)
            .ok_or(ProviderError::UnrecognizedPromptShape)?;
        let updated = nudged_rating(own_rating, &all);
        if updated > own_rating {
            verdict = "The responses and the other reviews address part of my concerns, so I raise my rating slightly.";
        } else if updated < own_rating {
            verdict = "Having seen the other assessments, I lower my rating slightly.";
        }
        out.push_str(&format!("Overall rating: {}\n\n", format_rating(updated)));
    }
    out.push_str("I have read the rebuttal and the other reviews. ");
    out.push_str(verdict);
    if !persona.irresponsible {
        if let Some(concern) = own.as_ref().and_then(|d| d.reasons_reject.first()) {
            out.push_str(&format!(
                " The concern I consider most important remains: {}",
                lower_first(concern)
            ));
        }
        let extra = [
            "I would like to see the promised changes reflected in the final version.",
            "The clarifications in the rebuttal are helpful but do not change the core picture.",
            "The discussion helped me calibrate my view against the other reviewers.",
        ];
        let reviewer_s = reviewer.to_string();
        let i = (seeded_hash(seed, &[paper, &reviewer_s, "phase3"]) % extra.len() as u64) as usize;
        out.push(' ');
        out.push_str(extra[i]);
        if persona.rich() {
            out.push_str(" I re-examined the evidence behind each of my points before finalizing this update.");
        }
    }
    Ok(out)
}

fn meta_review(prompt: &str, seed: u64) -> Result<String, ProviderError> {
    let paper = paper_id(prompt)?;
    let style = ["authoritarian", "conformist", "inclusive"]
        .into_iter()
        .find(|s| prompt.contains(&format!("Area chair persona: {s}.")))
        .unwrap_or("baseline");
    let reviews = reviews_in(prompt);
    let ratings = latest_ratings(prompt);
    let has_rebuttals = prompt.contains("=== AUTHOR REBUTTALS ===");
    let h = seeded_hash(seed, &[paper, "0", "phase4"]);

    let mut out = String::new();
    if prompt.contains(AC_RATING_MARKER) && !ratings.is_empty() {
        let mean = ratings.iter().sum::<f64>() / ratings.len() as f64;
        let score = match style {
            "inclusive" if has_rebuttals => round_quarter(mean + 0.25),
            "conformist" => {
                let mut sorted = ratings.clone();
                sorted.sort_by(f64::total_cmp);
                round_quarter(sorted[sorted.len() / 2])
            }
            "authoritarian" => {
                let own = 5.0 + ((h % 9) as f64 - 4.0) * 0.5;
                round_quarter((mean + own) / 2.0)
            }
            _ => round_quarter(mean),
        };
        out.push_str(&format!("Score: {}\n\n", format_rating(score)));
    }

    let strengths: Vec<&str> = reviews.values().flat_map(|d| d.reasons_accept.iter().map(String::as_str)).collect();
    let concerns: Vec<&str> = reviews.values().flat_map(|d| d.reasons_reject.iter().map(String::as_str)).collect();
    let take = |items: &[&str], n: usize| items.iter().take(n).map(|s| s.trim_end_matches('.')).collect::<Vec<_>>().join("; ");

    out.push_str(&format!("Summary: This meta-review covers paper {paper}."));
    match style {
        "conformist" => {
            out.push_str(&format!(
                " The reviewers highlight these strengths: {}. They raise these concerns: {}. I follow the reviewers' consensus in my recommendation.",
                take(&strengths, 4),
                take(&concerns, 4)
            ));
        }
        "authoritarian" => {
            let own_view = [
                "In my own reading the method is sound but the evidence is thinner than claimed.",
                "In my own reading the contribution is stronger than the reviews suggest.",
                "In my own reading the paper is borderline and the framing needs work.",
            ];
            out.push_str(&format!(" {}", own_view[(h % own_view.len() as u64) as usize]));
            out.push_str(&format!(" Of the reviewer comments, the most relevant is: {}.", take(&concerns, 1)));
        }
        "inclusive" => {
            out.push_str(&format!(
                " Weighing the reviews, the author responses and the discussion, the main strengths are: {}. The main concerns are: {}.",
                take(&strengths, 2),
                take(&concerns, 2)
            ));
            if has_rebuttals {
                out.push_str(" The rebuttal addresses part of these concerns and the authors commit to concrete revisions.");
            }
        }
        _ => {
            out.push_str(&format!(
                " Strengths noted by the reviewers: {}. Weaknesses: {}.",
                take(&strengths, 2),
                take(&concerns, 2)
            ));
            if has_rebuttals {
                out.push_str(" The reviewers acknowledged the rebuttal during the discussion.");
            }
        }
    }
    Ok(out)
}

fn final_decisions(prompt: &str, seed: u64) -> Result<String, ProviderError> {
    static QUOTA: OnceLock<Regex> = OnceLock::new();
    let quota: usize = re(&QUOTA, r"accept exactly (\d+) of these (\d+)")
        .captures(prompt)
        .and_then(|c| c[1].parse().ok())
        .ok_or(ProviderError::UnrecognizedPromptShape)?;
    let papers = chunks(prompt, paper_heading());
    let mut ranked: Vec<(Option<f64>, u64, String)> = papers
        .iter()
        .map(|(id, body)| {
            let score = documents::extract_score(body).ok().flatten();
            let tiebreak = match score {
                Some(_) => seeded_hash(seed, &[id, "phase5"]),
                None => seeded_hash(seed, &[body.trim()]),
            };
            (score, tiebreak, id.clone())
        })
        .collect();
    ranked.sort_by(|a, b| {
        let sa = a.0.unwrap_or(0.0);
        let sb = b.0.unwrap_or(0.0);
        sb.total_cmp(&sa).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let accepted: Vec<&str> = ranked.iter().take(quota).map(|r| r.2.as_str()).collect();
    let list = if accepted.is_empty() { "none".to_string() } else { accepted.join(", ") };
    Ok(format!(
        "After comparing all meta-reviews in this batch I accept the {quota} strongest submissions.\nAccepted: {list}"
    ))
}

fn categorize(prompt: &str) -> Result<String, ProviderError> {
    static CAT: OnceLock<Regex> = OnceLock::new();
    static STMT: OnceLock<Regex> = OnceLock::new();
    let statement = re(&STMT, r"(?m)^Statement: (.*)$")
        .captures(prompt)
        .map(|c| c[1].to_lowercase())
        .ok_or(ProviderError::UnrecognizedPromptShape)?;
    let chosen = re(&CAT, r"(?m)^- (.+?) \[keywords: (.*)\]$")
        .captures_iter(prompt)
        .find(|c| {
            c[2].split(',')
                .map(|k| k.trim().to_lowercase())
                .any(|k| !k.is_empty() && statement.contains(&k))
        })
        .map(|c| c[1].to_string())
        .unwrap_or_else(|| "Other".to_string());
    Ok(format!("Category: {chosen}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::fnv1a64;

    fn phase1_prompt(paper: &str, reviewer: u8, extra: &str, numeric: bool) -> String {
        format!(
            "{TASK_INITIAL_REVIEW}\nPaper ID: {paper}\nYou are Reviewer {reviewer}.\n\n{extra}\n\n{}\n\n=== MANUSCRIPT ===\nTitle: x\n=== END OF MANUSCRIPT ===",
            if numeric { "Rate the paper on a scale from 1 to 10 (10 is best)." } else { "" }
        )
    }

    // Independent evaluation of the documented hash: FNV-1a over
    // seed LE bytes, then 0x1f + each part.
    fn oracle_hash(seed: u64, parts: &[&str]) -> u64 {
        let mut bytes = seed.to_le_bytes().to_vec();
        for p in parts {
            bytes.push(0x1f);
            bytes.extend_from_slice(p.as_bytes());
        }
        fnv1a64(&bytes)
    }

    fn rating_of(text: &str) -> Option<f64> {
        documents::extract_overall_rating(text).unwrap()
    }

    #[test]
    fn baseline_rating_is_five_when_hash_mod_five_is_two() {
        // Found by scanning paper ids with the oracle hash.
        let paper = (0..100)
            .map(|i| format!("p{i}"))
            .find(|p| oracle_hash(7, &[p, "1", "phase1"]) % 5 == 2)
            .unwrap();
        let req = ChatRequest::new("", phase1_prompt(&paper, 1, "", true), "t");
        let text = mock_complete(&req, 7).unwrap().text;
        assert_eq!(rating_of(&text), Some(5.0));
    }

    #[test]
    fn ratings_follow_the_documented_formula() {
        for i in 0..50 {
            let paper = format!("sub{i}");
            let h = oracle_hash(11, &[&paper, "2", "phase1"]);
            let expected = 5.0 + ((h % 5) as f64 - 2.0) * 0.5;
            let base = mock_complete(&ChatRequest::new("", phase1_prompt(&paper, 2, "", true), "t"), 11).unwrap();
            assert_eq!(rating_of(&base.text), Some(expected));
            let mal = mock_complete(
                &ChatRequest::new("", phase1_prompt(&paper, 2, "Reviewer persona: malicious. x", true), "t"),
                11,
            )
            .unwrap();
            assert_eq!(rating_of(&mal.text), Some((expected - 2.0).max(1.0)));
        }
    }

    #[test]
    fn no_rating_without_instruction() {
        let text = mock_complete(&ChatRequest::new("", phase1_prompt("p1", 1, "", false), "t"), 1).unwrap().text;
        assert_eq!(rating_of(&text), None);
        assert!(parse_review(&text, 1, false).is_ok());
    }

    #[test]
    fn deterministic_per_seed() {
        let req = ChatRequest::new("", phase1_prompt("p9", 3, "", true), "t");
        assert_eq!(mock_complete(&req, 7), mock_complete(&req, 7));
    }

    #[test]
    fn unrecognized_prompt() {
        assert_eq!(
            mock_complete(&ChatRequest::new("", "hello there", "t"), 1),
            Err(ProviderError::UnrecognizedPromptShape)
        );
    }

    #[test]
    fn nudge_rule() {
        assert_eq!(nudged_rating(4.0, &[4.0, 5.0, 6.0]), 4.25);
        assert_eq!(nudged_rating(6.0, &[4.0, 5.0, 6.0]), 5.75);
        assert_eq!(nudged_rating(5.0, &[4.0, 5.0, 6.0]), 5.0);
        assert_eq!(nudged_rating(5.0, &[5.0, 5.0, 5.1]), 5.0);
    }

    #[test]
    fn phase5_names_exactly_quota_ids() {
        let mut prompt = format!("{TASK_FINAL_DECISIONS}\nyou must accept exactly 3 of these 10 papers\n");
        for i in 0..10 {
            prompt.push_str(&format!("\n--- Paper q{i} ---\nScore: {}\n\nSummary: text {i}\n", 3 + i % 4));
        }
        let text = mock_complete(&ChatRequest::new("", prompt, "t"), 5).unwrap().text;
        let ids = documents::parse_accepted_ids(&text).unwrap();
        assert_eq!(ids.len(), 3);
        // Scores 6 go to q3 and q7; the third slot is one of the two 5s.
        assert!(ids.contains(&"q3".to_string()) && ids.contains(&"q7".to_string()));
    }

    #[test]
    fn categorization_by_keyword() {
        let prompt = format!(
            "{TASK_CATEGORIZE}\n- Lack of novelty [keywords: novelty, incremental]\n- Presentation issues [keywords: unclear]\n\nStatement: lacks novelty compared to prior work\n"
        );
        let text = mock_complete(&ChatRequest::new("", prompt.clone(), "t"), 0).unwrap().text;
        assert_eq!(text, "Category: Lack of novelty");
        let other = prompt.replace("lacks novelty compared to prior work", "nice figures");
        assert_eq!(mock_complete(&ChatRequest::new("", other, "t"), 0).unwrap().text, "Category: Other");
    }

    #[test]
    fn embeddings() {
        let a = mock_embedding("a", 3);
        assert_eq!(a, mock_embedding("a", 3));
        assert_eq!(a.dim(), 64);
        assert!((a.cosine(&a) - 1.0).abs() < 1e-9);
        // Oracle: single tokens are signed one-hot vectors.
        let one_hot = |t: &str| {
            let h = oracle_hash(3, &["embed", t]);
            ((h % 64) as usize, if h >> 63 == 1 { -1.0 } else { 1.0 })
        };
        let (dx, sx) = one_hot("x");
        let (dy, sy) = one_hot("y");
        let expected = if dx == dy { sx * sy } else { 0.0 };
        assert_eq!(mock_embedding("x", 3).cosine(&mock_embedding("y", 3)), expected);
        assert_eq!(mock_embedding("x", 3).values()[dx], sx);
        let empty = mock_embedding("", 3);
        assert_eq!(empty.values()[0], 1.0);
    }
}
