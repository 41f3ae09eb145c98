//! Mapping review reasons onto a fixed category list with the analyst prompt.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::personas::{PromptTemplateSet, SlotBindings};
use crate::pipeline::PaperSimState;
use crate::provider::{ChatProvider, ChatRequest};

pub const OTHER_CATEGORY: &str = "Other";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonCategory {
    pub name: String,
    pub keywords: Vec<String>,
}

impl ReasonCategory {
    fn new(name: &str, keywords: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            keywords: keywords.iter().map(|k| k.to_string()).collect(),
        }
    }
}

/// Categories offered for each side of a review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub accept: Vec<ReasonCategory>,
    pub reject: Vec<ReasonCategory>,
}

impl Default for CategorySpec {
    fn default() -> Self {
        Self {
            accept: vec![
                ReasonCategory::new("Novelty and originality", &["novel", "original", "new idea", "first to"]),
                ReasonCategory::new("Strong empirical results", &["results", "experiment", "outperform", "state-of-the-art", "benchmark"]),
                ReasonCategory::new("Clarity of presentation", &["clear", "well written", "well-written", "presentation", "easy to follow"]),
                ReasonCategory::new("Practical significance", &["practical", "impact", "significan", "useful", "application"]),
                ReasonCategory::new("Reproducibility and resources", &["code", "reproduc", "dataset", "open source", "release"]),
            ],
            reject: vec![
                ReasonCategory::new("Lack of novelty", &["novelty", "incremental", "prior work", "derivative", "not new"]),
                ReasonCategory::new("Presentation issues", &["presentation", "unclear", "hard to follow", "writing", "notation", "organization"]),
                ReasonCategory::new("Scalability and practicality", &["scalab", "practical", "computational cost", "efficiency", "memory"]),
                ReasonCategory::new("Insufficient discussion of limitations", &["limitation", "failure mode"]),
                ReasonCategory::new("Insufficient experimental validation", &["experiment", "baseline", "ablation", "benchmark", "evaluation", "validation"]),
                ReasonCategory::new("Technical soundness", &["soundness", "proof", "assumption", "theoretical", "justification", "correctness"]),
                ReasonCategory::new("Reproducibility", &["reproduc", "hyperparameter", "implementation details", "code"]),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub name: String,
    pub count: usize,
    pub proportion: f64,
}

/// Category counts for one side, in spec order with "Other" last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideDistribution {
    pub total: usize,
    pub shares: Vec<CategoryShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ReasonDistribution {
    /// The run's reviews carry no reasons at all.
    Absent,
    Present {
        accept: SideDistribution,
        reject: SideDistribution,
    },
}

fn category_lines(categories: &[ReasonCategory]) -> String {
    categories
        .iter()
        .map(|c| format!("- {} [keywords: {}]", c.name, c.keywords.join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_category<'a>(reply: &str, categories: &'a [ReasonCategory]) -> &'a str {
    let label = reply
        .lines()
        .find_map(|l| l.trim().strip_prefix("Category:"))
        .map(|s| s.trim().trim_matches(|c| c == '*' || c == '"' || c == '.').trim())
        .unwrap_or("");
    categories
        .iter()
        .find(|c| c.name.eq_ignore_ascii_case(label))
        .map(|c| c.name.as_str())
        .unwrap_or(OTHER_CATEGORY)
}

fn classify_side(
    reasons: &[&str],
    side: &str,
    categories: &[ReasonCategory],
    provider: &dyn ChatProvider,
    templates: &PromptTemplateSet,
    cache: &mut BTreeMap<String, String>,
) -> Result<SideDistribution, AnalysisError> {
    let listing = category_lines(categories);
    let system = templates.system_prompt("analyst")?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for reason in reasons {
        let key = format!("{side}\u{0}{reason}");
        if !cache.contains_key(&key) {
            let prompt = templates.render(
                "analyst/categorize",
                &SlotBindings::new()
                    .bind("side", side)
                    .bind("categories", listing.clone())
                    .bind("reason", *reason),
            )?;
            let mut request = ChatRequest::new(system.clone(), prompt, format!("categorize {side}"));
            request.temperature = 0.0;
            let reply = provider.complete(&request)?;
            cache.insert(key.clone(), parse_category(&reply.text, categories).to_string());
        }
        let name = cache[&key].as_str();
        let name = categories.iter().map(|c| c.name.as_str()).find(|n| *n == name).unwrap_or(OTHER_CATEGORY);
        *counts.entry(name).or_default() += 1;
    }
    let total = reasons.len();
    let share = |name: &str| {
        let count = counts.get(name).copied().unwrap_or(0);
        CategoryShare {
            name: name.to_string(),
            count,
            proportion: if total == 0 { 0.0 } else { count as f64 / total as f64 },
        }
    };
    let mut shares: Vec<CategoryShare> = categories.iter().map(|c| share(&c.name)).collect();
    shares.push(share(OTHER_CATEGORY));
    Ok(SideDistribution { total, shares })
}

/// Categorizes every accept/reject reason of the initial reviews.
/// Identical statements are classified once.
pub fn categorize_reasons(
    states: &[PaperSimState],
    provider: &dyn ChatProvider,
    templates: &PromptTemplateSet,
    spec: &CategorySpec,
) -> Result<ReasonDistribution, AnalysisError> {
    let reviews = states.iter().flat_map(|s| s.phase1_reviews.iter());
    let accept: Vec<&str> = reviews.clone().flat_map(|r| r.reasons_accept.iter().map(String::as_str)).collect();
    let reject: Vec<&str> = reviews.flat_map(|r| r.reasons_reject.iter().map(String::as_str)).collect();
    if accept.is_empty() && reject.is_empty() {
        return Ok(ReasonDistribution::Absent);
    }
    let mut cache = BTreeMap::new();
    Ok(ReasonDistribution::Present {
        accept: classify_side(&accept, "reasons for acceptance", &spec.accept, provider, templates, &mut cache)?,
        reject: classify_side(&reject, "reasons for rejection", &spec.reject, provider, templates, &mut cache)?,
    })
}
