//! Reviewer and area-chair personas, and prompt rendering from templates.
//!
//! Templates live under `templates/<role>/<name>.txt` where `<name>` is a
//! phase (`phase1`), a phase with a trait (`phase4_inclusive`), or a passage
//! (`persona_malicious`, `identity_notice`, `rating_instruction`, `system`).
//! Placeholders are written `{slot_name}`; `{{` and `}}` produce literal
//! braces. Lines starting with `#!` are comments and are dropped at load.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;

/// Every placeholder a template may use.
pub const KNOWN_SLOTS: &[&str] = &[
    "manuscript",
    "own_review",
    "all_reviews",
    "rebuttals",
    "discussion",
    "metareviews",
    "identity_notice",
    "persona",
    "ac_persona",
    "rating_instruction",
    "paper_id",
    "reviewer_index",
    "review",
    "quota",
    "batch_size",
    "batch_index",
    "side",
    "categories",
    "reason",
];

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {template}: unknown placeholder {{{slot}}}")]
    UnknownPlaceholder { template: String, slot: String },
    #[error("template {template}: malformed placeholder at byte {offset}")]
    MalformedPlaceholder { template: String, offset: usize },
    #[error("slot {{{0}}} is not bound")]
    UnboundSlot(String),
    #[error("no template for role {role} in phase {phase}")]
    UnknownTemplate { role: String, phase: String },
    #[error("missing template file {0}")]
    MissingFile(String),
    #[error("i/o error reading templates: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Commitment {
    Normal,
    Responsible,
    Irresponsible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intention {
    Normal,
    Benign,
    Malicious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Knowledgeability {
    Normal,
    Knowledgeable,
    Unknowledgeable,
}

impl Commitment {
    pub const ALL: [Commitment; 3] = [Commitment::Normal, Commitment::Responsible, Commitment::Irresponsible];
    fn trait_name(self) -> Option<&'static str> {
        match self {
            Commitment::Normal => None,
            Commitment::Responsible => Some("responsible"),
            Commitment::Irresponsible => Some("irresponsible"),
        }
    }
}

impl Intention {
    pub const ALL: [Intention; 3] = [Intention::Normal, Intention::Benign, Intention::Malicious];
    fn trait_name(self) -> Option<&'static str> {
        match self {
            Intention::Normal => None,
            Intention::Benign => Some("benign"),
            Intention::Malicious => Some("malicious"),
        }
    }
}

impl Knowledgeability {
    pub const ALL: [Knowledgeability; 3] = [
        Knowledgeability::Normal,
        Knowledgeability::Knowledgeable,
        Knowledgeability::Unknowledgeable,
    ];
    fn trait_name(self) -> Option<&'static str> {
        match self {
            Knowledgeability::Normal => None,
            Knowledgeability::Knowledgeable => Some("knowledgeable"),
            Knowledgeability::Unknowledgeable => Some("unknowledgeable"),
        }
    }
}

/// A reviewer's coordinates on the three persona axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReviewerProfile {
    pub commitment: Commitment,
    pub intention: Intention,
    pub knowledgeability: Knowledgeability,
    #[serde(default)]
    pub knows_author_identity: bool,
}

impl Default for ReviewerProfile {
    fn default() -> Self {
        Self::baseline()
    }
}

impl ReviewerProfile {
    pub const fn baseline() -> Self {
        Self {
            commitment: Commitment::Normal,
            intention: Intention::Normal,
            knowledgeability: Knowledgeability::Normal,
            knows_author_identity: false,
        }
    }

    /// Names of the non-normal traits, in axis order.
    pub fn traits(&self) -> Vec<&'static str> {
        [
            self.commitment.trait_name(),
            self.intention.trait_name(),
            self.knowledgeability.trait_name(),
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    /// Profile with a single named trait applied, e.g. `"malicious"`.
    pub fn with_trait(mut self, name: &str) -> Option<Self> {
        match name {
            "responsible" => self.commitment = Commitment::Responsible,
            "irresponsible" => self.commitment = Commitment::Irresponsible,
            "benign" => self.intention = Intention::Benign,
            "malicious" => self.intention = Intention::Malicious,
            "knowledgeable" => self.knowledgeability = Knowledgeability::Knowledgeable,
            "unknowledgeable" => self.knowledgeability = Knowledgeability::Unknowledgeable,
            _ => return None,
        }
        Some(self)
    }

    /// All 27 trait combinations, identity-unaware.
    pub fn all_combinations() -> Vec<Self> {
        let mut out = Vec::with_capacity(27);
        for c in Commitment::ALL {
            for i in Intention::ALL {
                for k in Knowledgeability::ALL {
                    out.push(Self {
                        commitment: c,
                        intention: i,
                        knowledgeability: k,
                        knows_author_identity: false,
                    });
                }
            }
        }
        out
    }
}

pub const PERSONA_TRAITS: [&str; 6] = [
    "responsible",
    "irresponsible",
    "benign",
    "malicious",
    "knowledgeable",
    "unknowledgeable",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcStyle {
    #[default]
    Baseline,
    Authoritarian,
    Conformist,
    Inclusive,
}

impl AcStyle {
    pub const ALL: [AcStyle; 4] = [AcStyle::Baseline, AcStyle::Authoritarian, AcStyle::Conformist, AcStyle::Inclusive];

    pub fn as_str(self) -> &'static str {
        match self {
            AcStyle::Baseline => "baseline",
            AcStyle::Authoritarian => "authoritarian",
            AcStyle::Conformist => "conformist",
            AcStyle::Inclusive => "inclusive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseId {
    I,
    II,
    III,
    IV,
    V,
}

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PhaseId::I => "phase1",
            PhaseId::II => "phase2",
            PhaseId::III => "phase3",
            PhaseId::IV => "phase4",
            PhaseId::V => "phase5",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Template {
    lines: Vec<Vec<Token>>,
}

impl Template {
    fn parse(name: &str, source: &str) -> Result<Self, TemplateError> {
        let body: Vec<&str> = source.lines().filter(|l| !l.starts_with("#!")).collect();
        let mut lines = Vec::with_capacity(body.len());
        let mut offset = 0usize;
        for line in body {
            lines.push(Self::parse_line(name, line, offset)?);
            offset += line.len() + 1;
        }
        while lines.last().is_some_and(|l: &Vec<Token>| l.is_empty()) {
            lines.pop();
        }
        Ok(Self { lines })
    }

    fn parse_line(name: &str, line: &str, base: usize) -> Result<Vec<Token>, TemplateError> {
        let mut tokens = Vec::new();
        let mut text = String::new();
        let bytes = line.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    text.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    text.push('}');
                    i += 2;
                }
                b'{' => {
                    let close = line[i + 1..].find('}').ok_or(TemplateError::MalformedPlaceholder {
                        template: name.to_string(),
                        offset: base + i,
                    })?;
                    let slot = &line[i + 1..i + 1 + close];
                    if slot.is_empty() || !slot.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
                        return Err(TemplateError::MalformedPlaceholder {
                            template: name.to_string(),
                            offset: base + i,
                        });
                    }
                    if !KNOWN_SLOTS.contains(&slot) {
                        return Err(TemplateError::UnknownPlaceholder {
                            template: name.to_string(),
                            slot: slot.to_string(),
                        });
                    }
                    if !text.is_empty() {
                        tokens.push(Token::Text(std::mem::take(&mut text)));
                    }
                    tokens.push(Token::Slot(slot.to_string()));
                    i += close + 2;
                }
                b'}' => {
                    return Err(TemplateError::MalformedPlaceholder {
                        template: name.to_string(),
                        offset: base + i,
                    })
                }
                _ => {
                    let ch = line[i..].chars().next().expect("in bounds");
                    text.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !text.is_empty() {
            tokens.push(Token::Text(text));
        }
        Ok(tokens)
    }

    fn slots(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().flatten().filter_map(|t| match t {
            Token::Slot(s) => Some(s.as_str()),
            Token::Text(_) => None,
        })
    }

    /// Substitutes slots. A line holding only a slot whose value is empty
    /// disappears, and runs of blank template lines collapse to one.
    fn render(&self, bindings: &SlotBindings) -> Result<String, TemplateError> {
        let mut out: Vec<String> = Vec::with_capacity(self.lines.len());
        let mut last_blank = true;
        for line in &self.lines {
            if let [Token::Slot(slot)] = line.as_slice() {
                let value = bindings.get(slot)?;
                if value.is_empty() {
                    continue;
                }
                out.push(value.to_string());
                last_blank = false;
                continue;
            }
            if line.is_empty() {
                if !last_blank {
                    out.push(String::new());
                }
                last_blank = true;
                continue;
            }
            let mut rendered = String::new();
            for token in line {
                match token {
                    Token::Text(t) => rendered.push_str(t),
                    Token::Slot(s) => rendered.push_str(bindings.get(s)?),
                }
            }
            out.push(rendered);
            last_blank = false;
        }
        while out.last().is_some_and(|l| l.is_empty()) {
            out.pop();
        }
        Ok(out.join("\n"))
    }
}

/// Values for template placeholders.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotBindings {
    values: BTreeMap<String, String>,
}

impl SlotBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, slot: &str, value: impl Into<String>) -> Self {
        self.values.insert(slot.to_string(), value.into());
        self
    }

    pub fn set(&mut self, slot: &str, value: impl Into<String>) {
        self.values.insert(slot.to_string(), value.into());
    }

    fn get(&self, slot: &str) -> Result<&str, TemplateError> {
        self.values
            .get(slot)
            .map(String::as_str)
            .ok_or_else(|| TemplateError::UnboundSlot(slot.to_string()))
    }
}

const BUILTIN: &[(&str, &str)] = &[
    ("ac/persona_authoritarian", include_str!("../templates/ac/persona_authoritarian.txt")),
    ("ac/persona_conformist", include_str!("../templates/ac/persona_conformist.txt")),
    ("ac/persona_inclusive", include_str!("../templates/ac/persona_inclusive.txt")),
    ("ac/phase3", include_str!("../templates/ac/phase3.txt")),
    ("ac/phase4", include_str!("../templates/ac/phase4.txt")),
    ("ac/phase4_authoritarian", include_str!("../templates/ac/phase4_authoritarian.txt")),
    ("ac/phase4_conformist", include_str!("../templates/ac/phase4_conformist.txt")),
    ("ac/phase4_inclusive", include_str!("../templates/ac/phase4_inclusive.txt")),
    ("ac/phase5", include_str!("../templates/ac/phase5.txt")),
    ("ac/rating_instruction", include_str!("../templates/ac/rating_instruction.txt")),
    ("ac/system", include_str!("../templates/ac/system.txt")),
    ("analyst/categorize", include_str!("../templates/analyst/categorize.txt")),
    ("analyst/system", include_str!("../templates/analyst/system.txt")),
    ("author/phase2", include_str!("../templates/author/phase2.txt")),
    ("author/system", include_str!("../templates/author/system.txt")),
    ("reviewer/identity_notice", include_str!("../templates/reviewer/identity_notice.txt")),
    ("reviewer/persona_benign", include_str!("../templates/reviewer/persona_benign.txt")),
    ("reviewer/persona_irresponsible", include_str!("../templates/reviewer/persona_irresponsible.txt")),
    ("reviewer/persona_knowledgeable", include_str!("../templates/reviewer/persona_knowledgeable.txt")),
    ("reviewer/persona_malicious", include_str!("../templates/reviewer/persona_malicious.txt")),
    ("reviewer/persona_responsible", include_str!("../templates/reviewer/persona_responsible.txt")),
    ("reviewer/persona_unknowledgeable", include_str!("../templates/reviewer/persona_unknowledgeable.txt")),
    ("reviewer/phase1", include_str!("../templates/reviewer/phase1.txt")),
    ("reviewer/phase3", include_str!("../templates/reviewer/phase3.txt")),
    ("reviewer/rating_instruction", include_str!("../templates/reviewer/rating_instruction.txt")),
    ("reviewer/system", include_str!("../templates/reviewer/system.txt")),
];

/// Immutable, checksummed set of prompt templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplateSet {
    templates: BTreeMap<String, Template>,
    checksum: String,
}

impl PromptTemplateSet {
    /// The template set compiled into the crate.
    pub fn builtin() -> Self {
        Self::from_sources(BUILTIN.iter().map(|(n, s)| (n.to_string(), s.to_string())))
            .expect("built-in templates are valid")
    }

    /// Loads `<dir>/<role>/<name>.txt` files. Every built-in template name
    /// must be present.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut sources = Vec::new();
        let roles = fs::read_dir(dir).map_err(|e| TemplateError::Io(e.to_string()))?;
        for role in roles {
            let role = role.map_err(|e| TemplateError::Io(e.to_string()))?;
            if !role.path().is_dir() {
                continue;
            }
            let role_name = role.file_name().to_string_lossy().into_owned();
            for entry in fs::read_dir(role.path()).map_err(|e| TemplateError::Io(e.to_string()))? {
                let path = entry.map_err(|e| TemplateError::Io(e.to_string()))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                    continue;
                }
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let text = fs::read_to_string(&path).map_err(|e| TemplateError::Io(e.to_string()))?;
                sources.push((format!("{role_name}/{stem}"), text));
            }
        }
        let set = Self::from_sources(sources)?;
        for (name, _) in BUILTIN {
            if !set.templates.contains_key(*name) {
                return Err(TemplateError::MissingFile(format!("{name}.txt")));
            }
        }
        Ok(set)
    }

    pub fn from_sources(sources: impl IntoIterator<Item = (String, String)>) -> Result<Self, TemplateError> {
        let sources: BTreeMap<String, String> = sources.into_iter().collect();
        let mut digest_input = Vec::new();
        let mut templates = BTreeMap::new();
        for (name, text) in &sources {
            digest_input.extend_from_slice(name.as_bytes());
            digest_input.push(0);
            digest_input.extend_from_slice(text.as_bytes());
            digest_input.push(0);
            templates.insert(name.clone(), Template::parse(name, text)?);
        }
        Ok(Self {
            templates,
            checksum: sha256_hex(&digest_input),
        })
    }

    /// SHA-256 over the sorted (name, source) pairs.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Slots referenced by a template.
    pub fn slots_of(&self, name: &str) -> Option<Vec<&str>> {
        self.templates.get(name).map(|t| t.slots().collect())
    }

    pub fn render(&self, name: &str, bindings: &SlotBindings) -> Result<String, TemplateError> {
        let (role, phase) = name.split_once('/').unwrap_or((name, ""));
        self.templates
            .get(name)
            .ok_or_else(|| TemplateError::UnknownTemplate {
                role: role.to_string(),
                phase: phase.to_string(),
            })?
            .render(bindings)
    }

    /// Renders a slot-free passage.
    pub fn passage(&self, name: &str) -> Result<String, TemplateError> {
        self.render(name, &SlotBindings::new())
    }

    pub fn system_prompt(&self, role: &str) -> Result<String, TemplateError> {
        self.passage(&format!("{role}/system"))
    }
}

/// Per-prompt switches owned by the simulation config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptFlags {
    pub numeric_rating: bool,
    /// The paper is identity-flagged for this run.
    pub identity_flagged: bool,
}

/// Renders a reviewer prompt for Phase I or III. Binds `persona`,
/// `identity_notice` and `rating_instruction`; everything else comes from
/// `context`.
pub fn render_reviewer_prompt(
    templates: &PromptTemplateSet,
    profile: &ReviewerProfile,
    phase: PhaseId,
    flags: PromptFlags,
    context: &SlotBindings,
) -> Result<String, TemplateError> {
    if !matches!(phase, PhaseId::I | PhaseId::III) {
        return Err(TemplateError::UnknownTemplate {
            role: "reviewer".into(),
            phase: phase.to_string(),
        });
    }
    let persona = profile
        .traits()
        .iter()
        .map(|t| templates.passage(&format!("reviewer/persona_{t}")))
        .collect::<Result<Vec<_>, _>>()?
        .join("\n\n");
    let notice = if profile.knows_author_identity && flags.identity_flagged {
        templates.passage("reviewer/identity_notice")?
    } else {
        String::new()
    };
    let rating = if flags.numeric_rating {
        templates.passage("reviewer/rating_instruction")?
    } else {
        String::new()
    };
    let mut bindings = context.clone();
    bindings.set("persona", persona);
    bindings.set("identity_notice", notice);
    bindings.set("rating_instruction", rating);
    templates.render(&format!("reviewer/{phase}"), &bindings)
}

/// Renders the Phase II prompt: the manuscript plus exactly one review.
pub fn render_author_prompt(
    templates: &PromptTemplateSet,
    paper_id: &str,
    manuscript: &str,
    review: &crate::documents::ReviewDocument,
) -> Result<String, TemplateError> {
    let bindings = SlotBindings::new()
        .bind("paper_id", paper_id)
        .bind("reviewer_index", review.reviewer_index.to_string())
        .bind("manuscript", manuscript)
        .bind("review", review.raw_text.as_str());
    templates.render("author/phase2", &bindings)
}

/// Renders an area-chair prompt for Phase III, IV or V. Binds `ac_persona`
/// and `rating_instruction` (Phase IV only).
pub fn render_ac_prompt(
    templates: &PromptTemplateSet,
    style: AcStyle,
    phase: PhaseId,
    numeric_rating: bool,
    context: &SlotBindings,
) -> Result<String, TemplateError> {
    let name = match (phase, style) {
        (PhaseId::III, _) => "ac/phase3".to_string(),
        (PhaseId::IV, AcStyle::Baseline) => "ac/phase4".to_string(),
        (PhaseId::IV, s) => format!("ac/phase4_{}", s.as_str()),
        (PhaseId::V, _) => "ac/phase5".to_string(),
        (p, _) => {
            return Err(TemplateError::UnknownTemplate {
                role: "ac".into(),
                phase: p.to_string(),
            })
        }
    };
    let persona = match style {
        AcStyle::Baseline => String::new(),
        s => templates.passage(&format!("ac/persona_{}", s.as_str()))?,
    };
    let rating = if numeric_rating && phase == PhaseId::IV {
        templates.passage("ac/rating_instruction")?
    } else {
        String::new()
    };
    let mut bindings = context.clone();
    bindings.set("ac_persona", persona);
    bindings.set("rating_instruction", rating);
    templates.render(&name, &bindings)
}
