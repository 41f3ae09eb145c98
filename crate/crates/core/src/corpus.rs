//! Submission corpora: JSONL ingestion, stratified sampling and manuscript
//! assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;

/// Default manuscript length limit in characters.
pub const DEFAULT_MAX_CHARS: usize = 60_000;

const REQUIRED_FIELDS: [&str; 7] = [
    "id",
    "title",
    "abstract",
    "captions",
    "main_text",
    "venue_year",
    "ground_truth",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("duplicate paper id {0:?}")]
    DuplicateId(String),
    #[error("record at line {line} is missing field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("cannot sample {requested} papers from a corpus of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Ground-truth outcome of a submission. Ordered `Reject < Poster < Spotlight < Oral`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionCategory {
    Reject,
    Poster,
    Spotlight,
    Oral,
}

impl DecisionCategory {
    pub const ALL: [DecisionCategory; 4] = [
        DecisionCategory::Oral,
        DecisionCategory::Spotlight,
        DecisionCategory::Poster,
        DecisionCategory::Reject,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecisionCategory::Oral => "oral",
            DecisionCategory::Spotlight => "spotlight",
            DecisionCategory::Poster => "poster",
            DecisionCategory::Reject => "reject",
        }
    }

    pub fn is_accepted(self) -> bool {
        self != DecisionCategory::Reject
    }
}

impl fmt::Display for DecisionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaperRecord {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub captions: Vec<String>,
    pub main_text: String,
    pub venue_year: i32,
    pub ground_truth: DecisionCategory,
}

/// Papers sorted by id with per-category counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    papers: Vec<PaperRecord>,
    counts: BTreeMap<DecisionCategory, usize>,
}

impl Corpus {
    /// Builds a corpus, sorting by id and rejecting duplicate ids.
    pub fn from_records(mut papers: Vec<PaperRecord>) -> Result<Self, CorpusError> {
        papers.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in papers.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(CorpusError::DuplicateId(pair[0].id.clone()));
            }
        }
        let mut counts: BTreeMap<DecisionCategory, usize> =
            DecisionCategory::ALL.iter().map(|c| (*c, 0)).collect();
        for p in &papers {
            *counts.entry(p.ground_truth).or_default() += 1;
        }
        Ok(Self { papers, counts })
    }

    pub fn papers(&self) -> &[PaperRecord] {
        &self.papers
    }

    pub fn len(&self) -> usize {
        self.papers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.papers.is_empty()
    }

    pub fn count(&self, category: DecisionCategory) -> usize {
        self.counts.get(&category).copied().unwrap_or(0)
    }

    pub fn counts_by_category(&self) -> &BTreeMap<DecisionCategory, usize> {
        &self.counts
    }

    pub fn get(&self, id: &str) -> Option<&PaperRecord> {
        self.papers
            .binary_search_by(|p| p.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.papers[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.papers.iter().map(|p| p.id.as_str())
    }

    /// Canonical JSONL encoding: one record per line, sorted by id.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.papers {
            out.push_str(&serde_json::to_string(p).expect("paper records always serialize"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical encoding; recorded in run manifests.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

/// Reads a JSONL corpus file.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path)?;
    parse_corpus(&text)
}

/// Parses JSONL corpus text. Blank lines are ignored.
pub fn parse_corpus(text: &str) -> Result<Corpus, CorpusError> {
    let mut papers = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        let obj = value.as_object().ok_or_else(|| CorpusError::MalformedRecord {
            line: line_no,
            message: "record is not a JSON object".into(),
        })?;
        for field in REQUIRED_FIELDS {
            if !obj.contains_key(field) {
                return Err(CorpusError::MissingField {
                    line: line_no,
                    field: field.to_string(),
                });
            }
        }
        let record: PaperRecord =
            serde_json::from_value(value).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        for (name, v) in [
            ("id", &record.id),
            ("title", &record.title),
            ("abstract", &record.abstract_text),
        ] {
            if v.trim().is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: line_no,
                    message: format!("field `{name}` is empty"),
                });
            }
        }
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId(record.id));
        }
        papers.push(record);
    }
    Corpus::from_records(papers)
}

/// Largest-remainder apportionment of `n` over `counts` in proportion to the
/// counts. Ties between equal remainders go to the earlier entry.
pub fn largest_remainder_allocation(counts: &[usize], n: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    // Exact integer arithmetic: share_i = n * c_i / total.
    let mut alloc: Vec<usize> = counts.iter().map(|&c| n * c / total).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = n * counts[a] % total;
        let rb = n * counts[b] % total;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        alloc[i] += 1;
    }
    alloc
}

/// Per-category allocation used by [`stratified_sample`].
pub fn stratified_allocation(corpus: &Corpus, n: usize) -> BTreeMap<DecisionCategory, usize> {
    let counts: Vec<usize> = DecisionCategory::ALL
        .iter()
        .map(|c| corpus.count(*c))
        .collect();
    DecisionCategory::ALL
        .iter()
        .copied()
        .zip(largest_remainder_allocation(&counts, n))
        .collect()
}

/// Draws `n` papers, allocating per category by largest remainder and
/// selecting within each category by a seeded shuffle of the sorted ids.
pub fn stratified_sample(corpus: &Corpus, n: usize, seed: u64) -> Result<Corpus, CorpusError> {
    if n > corpus.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: corpus.len(),
        });
    }
    let allocation = stratified_allocation(corpus, n);
    let mut selected = Vec::with_capacity(n);
    for (rank, category) in DecisionCategory::ALL.iter().enumerate() {
        let take = allocation[category];
        let mut members: Vec<&PaperRecord> = corpus
            .papers()
            .iter()
            .filter(|p| p.ground_truth == *category)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (rank as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        members.shuffle(&mut rng);
        selected.extend(members.into_iter().take(take).cloned());
    }
    Corpus::from_records(selected)
}

/// Concatenates title, abstract, captions and main text with labeled
/// separators, truncated at a whitespace boundary to at most `max_chars`
/// characters.
pub fn assemble_manuscript_text(record: &PaperRecord, max_chars: usize) -> String {
    let mut blocks = vec![
        format!("Title: {}", record.title.trim()),
        format!("Abstract: {}", record.abstract_text.trim()),
    ];
    if !record.captions.is_empty() {
        let mut captions = String::from("Figure and table captions:");
        for c in &record.captions {
            captions.push_str("\n- ");
            captions.push_str(c.trim());
        }
        blocks.push(captions);
    }
    if !record.main_text.trim().is_empty() {
        blocks.push(format!("Main text:\n{}", record.main_text.trim()));
    }
    truncate_at_whitespace(&blocks.join("\n\n"), max_chars)
}

fn truncate_at_whitespace(text: &str, max_chars: usize) -> String {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() <= max_chars {
        return text.to_string();
    }
    let cut = (1..=max_chars)
        .rev()
        .find(|&i| chars[i].is_whitespace())
        .unwrap_or(max_chars);
    chars[..cut].iter().collect::<String>().trim_end().to_string()
}

/// Generates a corpus of synthetic records with the given category counts.
/// Text is made of pseudo-words so that it never overlaps generated review
/// prose; used for demos, tests and benchmarks.
pub fn synthetic_corpus(counts: &[(DecisionCategory, usize)], seed: u64) -> Corpus {
    use rand::Rng;
    const SYLLABLES: [&str; 16] = [
        "ka", "lo", "mi", "ru", "ze", "tav", "quo", "nif", "bex", "dru", "syl", "vom", "prae",
        "gug", "wen", "ty",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(2..=4);
        (0..n).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect()
    };
    let sentence = |rng: &mut ChaCha8Rng, words: usize| -> String {
        let mut s: Vec<String> = (0..words).map(|_| word(rng)).collect();
        if let Some(first) = s.first_mut() {
            *first = capitalize(first);
        }
        s.join(" ") + "."
    };
    let mut papers = Vec::new();
    let mut serial = 0usize;
    for (category, count) in counts {
        for _ in 0..*count {
            serial += 1;
            let id = format!("sub{serial:04}");
            let title = sentence(&mut rng, 6).trim_end_matches('.').to_string();
            let abstract_text = (0..4).map(|_| sentence(&mut rng, 12)).collect::<Vec<_>>().join(" ");
            let captions = (0..rng.gen_range(0..3usize))
                .map(|_| sentence(&mut rng, 8))
                .collect();
            let main_text = (0..3)
                .map(|_| (0..5).map(|_| sentence(&mut rng, 14)).collect::<Vec<_>>().join(" "))
                .collect::<Vec<_>>()
                .join("\n\n");
            papers.push(PaperRecord {
                id,
                title,
                abstract_text,
                captions,
                main_text,
                venue_year: 2020 + (serial % 4) as i32,
                ground_truth: *category,
            });
        }
    }
    Corpus::from_records(papers).expect("synthetic ids are unique")
}

/// Category counts of the reference ICLR 2020-2023 sample.
pub const REFERENCE_COUNTS: [(DecisionCategory, usize); 4] = [
    (DecisionCategory::Reject, 350),
    (DecisionCategory::Poster, 125),
    (DecisionCategory::Spotlight, 29),
    (DecisionCategory::Oral, 19),
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, cat: DecisionCategory) -> PaperRecord {
        PaperRecord {
            id: id.into(),
            title: format!("Title {id}"),
            abstract_text: "An abstract.".into(),
            captions: vec![],
            main_text: "Body text here.".into(),
            venue_year: 2021,
            ground_truth: cat,
        }
    }

    #[test]
    fn load_one_per_category() {
        let corpus = Corpus::from_records(vec![
            record("d", DecisionCategory::Reject),
            record("a", DecisionCategory::Oral),
            record("c", DecisionCategory::Poster),
            record("b", DecisionCategory::Spotlight),
        ])
        .unwrap();
        let text = corpus.to_jsonl();
        let loaded = parse_corpus(&text).unwrap();
        assert_eq!(loaded.ids().collect::<Vec<_>>(), ["a", "b", "c", "d"]);
        for c in DecisionCategory::ALL {
            assert_eq!(loaded.count(c), 1);
        }
        assert_eq!(loaded.to_jsonl(), text);
    }

    #[test]
    fn duplicate_id_rejected() {
        let line = serde_json::to_string(&record("p1", DecisionCategory::Reject)).unwrap();
        let text = format!("{line}\n{line}\n");
        match parse_corpus(&text) {
            Err(CorpusError::DuplicateId(id)) => assert_eq!(id, "p1"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn missing_and_malformed_fields() {
        let err = parse_corpus(r#"{"id":"x","title":"t"}"#).unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { line: 1, ref field } if field == "abstract"));
        let err = parse_corpus("{not json").unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRecord { line: 1, .. }));
        let bad = r#"{"id":"x","title":"t","abstract":"a","captions":[],"main_text":"","venue_year":2021,"ground_truth":"maybe"}"#;
        assert!(matches!(parse_corpus(bad), Err(CorpusError::MalformedRecord { .. })));
        let extra = r#"{"id":"x","title":"t","abstract":"a","captions":[],"main_text":"","venue_year":2021,"ground_truth":"oral","x":1}"#;
        assert!(matches!(parse_corpus(extra), Err(CorpusError::MalformedRecord { .. })));
    }

    #[test]
    fn allocation_for_100_of_reference() {
        let alloc = largest_remainder_allocation(&[19, 29, 125, 350], 100);
        // Oral, Spotlight, Poster, Reject
        assert_eq!(alloc, vec![4, 5, 24, 67]);
    }

    #[test]
    fn sample_everything_is_identity() {
        let corpus = synthetic_corpus(&REFERENCE_COUNTS, 3);
        let sample = stratified_sample(&corpus, corpus.len(), 99).unwrap();
        assert_eq!(sample, corpus);
        assert_eq!(sample.count(DecisionCategory::Reject), 350);
        assert_eq!(sample.count(DecisionCategory::Poster), 125);
        assert_eq!(sample.count(DecisionCategory::Spotlight), 29);
        assert_eq!(sample.count(DecisionCategory::Oral), 19);
    }

    #[test]
    fn sample_too_large() {
        let corpus = synthetic_corpus(&[(DecisionCategory::Reject, 3)], 1);
        assert!(matches!(
            stratified_sample(&corpus, 4, 0),
            Err(CorpusError::SampleTooLarge { requested: 4, available: 3 })
        ));
        assert!(stratified_sample(&corpus, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn manuscript_without_captions() {
        let r = record("p", DecisionCategory::Poster);
        let text = assemble_manuscript_text(&r, usize::MAX);
        assert_eq!(text, "Title: Title p\n\nAbstract: An abstract.\n\nMain text:\nBody text here.");
        assert!(!text.contains("captions"));
    }

    #[test]
    fn manuscript_truncates_to_title_block() {
        let r = record("p", DecisionCategory::Poster);
        let title_block = "Title: Title p";
        let text = assemble_manuscript_text(&r, title_block.chars().count());
        assert_eq!(text, title_block);
        assert_eq!(text, assemble_manuscript_text(&r, title_block.chars().count()));
    }

    #[test]
    fn manuscript_truncation_never_splits_words() {
        let r = record("p", DecisionCategory::Poster);
        let full = assemble_manuscript_text(&r, usize::MAX);
        for limit in 1..full.len() {
            let t = assemble_manuscript_text(&r, limit);
            assert!(t.chars().count() <= limit);
            assert!(full.starts_with(&t));
        }
    }
}
