//! Parse/serialize layer for every generated artifact.
//!
//! Reviews follow a four-section layout:
//!
//! ```text
//! Overall rating: 5
//!
//! Significance and novelty: ...
//!
//! Reasons for acceptance:
//! - ...
//!
//! Reasons for rejection:
//! - ...
//!
//! Suggestions for improvement:
//! - ...
//! ```
//!
//! Parsing is lenient (markdown emphasis, any bullet style, prose between
//! sections); serialization always produces the canonical form above.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_RATING: f64 = 1.0;
pub const MAX_RATING: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("no rating line found")]
    MissingRating,
    #[error("missing section `{0}`")]
    MissingSection(String),
    #[error("rating {0} is outside [1, 10]")]
    RatingOutOfRange(f64),
    #[error("document is empty")]
    Empty,
    #[error("no accepted paper list found")]
    MissingDecisionList,
}

/// The four review sections, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    SignificanceNovelty,
    ReasonsAccept,
    ReasonsReject,
    Suggestions,
}

impl Section {
    pub const ALL: [Section; 4] = [
        Section::SignificanceNovelty,
        Section::ReasonsAccept,
        Section::ReasonsReject,
        Section::Suggestions,
    ];

    pub fn header(self) -> &'static str {
        match self {
            Section::SignificanceNovelty => "Significance and novelty",
            Section::ReasonsAccept => "Reasons for acceptance",
            Section::ReasonsReject => "Reasons for rejection",
            Section::Suggestions => "Suggestions for improvement",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.header())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewDocument {
    pub reviewer_index: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    pub significance_novelty: String,
    pub reasons_accept: Vec<String>,
    pub reasons_reject: Vec<String>,
    pub suggestions: Vec<String>,
    pub raw_text: String,
    pub word_count: usize,
}

impl ReviewDocument {
    /// Builds a document whose `raw_text` is the canonical serialization.
    pub fn new(
        reviewer_index: u8,
        rating: Option<f64>,
        significance_novelty: impl Into<String>,
        reasons_accept: Vec<String>,
        reasons_reject: Vec<String>,
        suggestions: Vec<String>,
    ) -> Self {
        let mut doc = Self {
            reviewer_index,
            rating,
            significance_novelty: significance_novelty.into(),
            reasons_accept,
            reasons_reject,
            suggestions,
            raw_text: String::new(),
            word_count: 0,
        };
        doc.raw_text = serialize_review(&doc);
        doc.word_count = count_words(&doc.raw_text);
        doc
    }

    /// Section bodies written by the reviewer, without headers or rating line.
    pub fn authored_fragments(&self) -> Vec<&str> {
        let mut out = vec![self.significance_novelty.as_str()];
        out.extend(self.reasons_accept.iter().map(String::as_str));
        out.extend(self.reasons_reject.iter().map(String::as_str));
        out.extend(self.suggestions.iter().map(String::as_str));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebuttalDocument {
    pub reviewer_index: u8,
    pub text: String,
    pub word_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    AreaChair,
    Reviewer(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscussionTurn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdatedReview {
    pub reviewer_index: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    pub text: String,
    pub word_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaReview {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    pub text: String,
    pub word_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperDecision {
    pub paper_id: String,
    pub accept: bool,
    pub batch_index: usize,
}

/// Number of maximal non-whitespace runs.
pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

fn rating_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^[\s*#_>]*overall\s+rating[\s*_]*:[\s*_]*([+-]?\d+(?:\.\d+)?)")
            .expect("valid regex")
    })
}

fn score_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^[\s*#_>]*(?:overall\s+)?(?:score|rating)[\s*_]*:[\s*_]*([+-]?\d+(?:\.\d+)?)")
            .expect("valid regex")
    })
}

fn bullet_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*•+]|\d+[.)])\s+(.*)$").expect("valid regex"))
}

fn checked_rating(captured: &str) -> Result<f64, ParseError> {
    let value: f64 = captured.parse().map_err(|_| ParseError::MissingRating)?;
    if !(MIN_RATING..=MAX_RATING).contains(&value) {
        return Err(ParseError::RatingOutOfRange(value));
    }
    Ok(value)
}

/// First `Overall rating: N` line, if any.
pub fn extract_overall_rating(raw: &str) -> Result<Option<f64>, ParseError> {
    rating_line_re()
        .captures(raw)
        .map(|c| checked_rating(&c[1]))
        .transpose()
}

/// First `Score: N` (or rating) line, if any; used for meta-reviews.
pub fn extract_score(raw: &str) -> Result<Option<f64>, ParseError> {
    score_line_re()
        .captures(raw)
        .map(|c| checked_rating(&c[1]))
        .transpose()
}

/// If `line` opens a section, returns the section and the inline remainder.
fn match_header(line: &str) -> Option<(Section, String)> {
    let stripped = line.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '#' | '_'));
    let lower = stripped.to_ascii_lowercase();
    for section in Section::ALL {
        let header = section.header().to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix(&header) {
            let rest_orig = &stripped[stripped.len() - rest.len()..];
            let after = rest_orig.trim_start_matches(['*', '_']);
            if let Some(body) = after.strip_prefix(':') {
                return Some((section, body.trim_start_matches(['*', '_']).trim().to_string()));
            }
            if after.trim().is_empty() {
                return Some((section, String::new()));
            }
        }
    }
    None
}

fn parse_list(lines: &[String]) -> Vec<String> {
    let has_bullets = lines.iter().any(|l| bullet_re().is_match(l));
    if !has_bullets {
        return lines
            .iter()
            .map(|l| l.trim())
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
    }
    let mut items: Vec<String> = Vec::new();
    let mut open = false;
    for line in lines {
        if let Some(c) = bullet_re().captures(line) {
            items.push(c[1].trim().to_string());
            open = true;
        } else if line.trim().is_empty() {
            open = false;
        } else if open {
            let last = items.last_mut().expect("open implies an item");
            last.push(' ');
            last.push_str(line.trim());
        }
    }
    items
}

/// Parses a four-section review.
pub fn parse_review(
    raw: &str,
    reviewer_index: u8,
    require_rating: bool,
) -> Result<ReviewDocument, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let rating = extract_overall_rating(raw)?;
    if require_rating && rating.is_none() {
        return Err(ParseError::MissingRating);
    }
    let mut bodies: [Option<Vec<String>>; 4] = Default::default();
    let mut current: Option<usize> = None;
    for line in raw.lines() {
        if let Some((section, inline)) = match_header(line) {
            let idx = Section::ALL.iter().position(|s| *s == section).expect("known section");
            if bodies[idx].is_none() {
                let mut body = Vec::new();
                if !inline.is_empty() {
                    body.push(inline);
                }
                bodies[idx] = Some(body);
                current = Some(idx);
                continue;
            }
        }
        if rating_line_re().is_match(line) {
            continue;
        }
        if let Some(idx) = current {
            bodies[idx].as_mut().expect("current section open").push(line.to_string());
        }
    }
    let mut take = |section: Section| -> Result<Vec<String>, ParseError> {
        let idx = Section::ALL.iter().position(|s| *s == section).expect("known section");
        bodies[idx]
            .take()
            .ok_or_else(|| ParseError::MissingSection(section.header().to_string()))
    };
    let significance = take(Section::SignificanceNovelty)?.join("\n").trim().to_string();
    let reasons_accept = parse_list(&take(Section::ReasonsAccept)?);
    let reasons_reject = parse_list(&take(Section::ReasonsReject)?);
    let suggestions = parse_list(&take(Section::Suggestions)?);
    Ok(ReviewDocument {
        reviewer_index,
        rating,
        significance_novelty: significance,
        reasons_accept,
        reasons_reject,
        suggestions,
        raw_text: raw.to_string(),
        word_count: count_words(raw),
    })
}

/// Renders a rating the way it is written back into documents (`5`, `4.5`).
pub fn format_rating(rating: f64) -> String {
    format!("{rating}")
}

/// Canonical review text.
pub fn serialize_review(doc: &ReviewDocument) -> String {
    let mut out = String::new();
    if let Some(r) = doc.rating {
        out.push_str(&format!("Overall rating: {}\n\n", format_rating(r)));
    }
    if doc.significance_novelty.is_empty() {
        out.push_str(&format!("{}:\n\n", Section::SignificanceNovelty.header()));
    } else {
        out.push_str(&format!(
            "{}: {}\n\n",
            Section::SignificanceNovelty.header(),
            doc.significance_novelty
        ));
    }
    let lists = [
        (Section::ReasonsAccept, &doc.reasons_accept),
        (Section::ReasonsReject, &doc.reasons_reject),
        (Section::Suggestions, &doc.suggestions),
    ];
    for (i, (section, items)) in lists.iter().enumerate() {
        out.push_str(section.header());
        out.push_str(":\n");
        for item in items.iter() {
            out.push_str("- ");
            out.push_str(item);
            out.push('\n');
        }
        if i + 1 < lists.len() {
            out.push('\n');
        }
    }
    out
}

pub fn parse_rebuttal(raw: &str, reviewer_index: u8) -> Result<RebuttalDocument, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    Ok(RebuttalDocument {
        reviewer_index,
        text: raw.to_string(),
        word_count: count_words(raw),
    })
}

/// Free-form updated review; the rating comes from the first
/// `Overall rating:` line.
pub fn parse_updated_review(
    raw: &str,
    reviewer_index: u8,
    require_rating: bool,
) -> Result<UpdatedReview, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let rating = extract_overall_rating(raw)?;
    if require_rating && rating.is_none() {
        return Err(ParseError::MissingRating);
    }
    Ok(UpdatedReview {
        reviewer_index,
        rating: if require_rating { rating } else { None },
        text: raw.to_string(),
        word_count: count_words(raw),
    })
}

pub fn parse_meta_review(raw: &str, require_rating: bool) -> Result<MetaReview, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let rating = extract_score(raw)?;
    if require_rating && rating.is_none() {
        return Err(ParseError::MissingRating);
    }
    Ok(MetaReview {
        rating: if require_rating { rating } else { None },
        text: raw.to_string(),
        word_count: count_words(raw),
    })
}

fn accepted_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[\s*#_]*accepted(?:\s+papers)?[\s*_]*:(.*)$").expect("valid regex"))
}

/// Extracts the id list from an `Accepted: id1, id2, ...` line.
pub fn parse_accepted_ids(raw: &str) -> Result<Vec<String>, ParseError> {
    let caps = accepted_line_re()
        .captures(raw)
        .ok_or(ParseError::MissingDecisionList)?;
    Ok(caps[1]
        .split([',', ';'])
        .map(|s| s.trim().trim_matches(['*', '`', '"', '\'', '.', '[', ']']).trim().to_string())
        .filter(|s| !s.is_empty() && !s.eq_ignore_ascii_case("none"))
        .collect())
}
