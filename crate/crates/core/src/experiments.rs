//! Experiment settings, baseline reuse and sweep driving.
//!
//! A setting is a named [`SimulationConfig`], optionally with an identity
//! spec that is resolved against the corpus. Runs that name a baseline
//! link every artifact whose inputs are unchanged instead of asking the
//! provider again.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, DecisionCategory};
use crate::hashing::seeded_hash;
use crate::personas::{AcStyle, PromptTemplateSet, ReviewerProfile, PERSONA_TRAITS};
use crate::pipeline::{
    batches, PaperSimState, PipelineError, PipelineOptions, ReuseSource, Simulation, SimulationConfig, REVIEWERS,
};
use crate::provider::ChatProvider;
use crate::store::{ArtifactKind, RunManifest, RunStatus, Store, StoreError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("baseline is incompatible: {0}")]
    IncompatibleBaseline(String),
    #[error("baseline run {0} is not complete")]
    BaselineIncomplete(String),
    #[error("cannot resume run {run_id}: {reason}")]
    ResumeMismatch { run_id: String, reason: String },
    #[error("no papers in the {0:?} quality stratum")]
    EmptyStratum(Stratum),
    #[error("invalid experiment spec: {0}")]
    Spec(String),
}

/// Ground-truth quality stratum used for identity-flag selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    /// Oral, spotlight and poster papers.
    High,
    /// Rejected papers.
    Low,
}

impl Stratum {
    pub fn contains(self, category: DecisionCategory) -> bool {
        match self {
            Stratum::High => category.is_accepted(),
            Stratum::Low => !category.is_accepted(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::High => "high",
            Stratum::Low => "low",
        }
    }
}

/// `aware_reviewers` reviewers know the authors of a `fraction` of the stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitySpec {
    pub aware_reviewers: u8,
    pub fraction: f64,
    pub stratum: Stratum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSetting {
    pub name: String,
    #[serde(default)]
    pub config: SimulationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<IdentitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_run: Option<String>,
}

impl ExperimentSetting {
    pub fn new(name: impl Into<String>, config: SimulationConfig) -> Self {
        Self {
            name: name.into(),
            config,
            identity: None,
            baseline_run: None,
        }
    }

    /// The config with the identity spec applied to `corpus`.
    pub fn resolve(&self, corpus: &Corpus) -> Result<SimulationConfig, ExperimentError> {
        let mut config = self.config.clone();
        if let Some(spec) = self.identity {
            config.identity_aware_reviewers = spec.aware_reviewers;
            config.identity_flagged_papers = select_identity_flagged(corpus, spec.fraction, spec.stratum, config.seed)?;
        }
        config.validate()?;
        Ok(config)
    }
}

/// `ceil(fraction * |stratum|)` ids sampled from the stratum with a seeded RNG.
pub fn select_identity_flagged(
    corpus: &Corpus,
    fraction: f64,
    stratum: Stratum,
    seed: u64,
) -> Result<BTreeSet<String>, ExperimentError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ExperimentError::Spec(format!("identity fraction {fraction} outside [0, 1]")));
    }
    if fraction == 0.0 {
        return Ok(BTreeSet::new());
    }
    let members: Vec<&str> = corpus
        .papers()
        .iter()
        .filter(|p| stratum.contains(p.ground_truth))
        .map(|p| p.id.as_str())
        .collect();
    if members.is_empty() {
        return Err(ExperimentError::EmptyStratum(stratum));
    }
    let n = ((fraction * members.len() as f64) - 1e-9).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seeded_hash(seed, &["identity", stratum.as_str()]));
    Ok(members
        .choose_multiple(&mut rng, n.min(members.len()))
        .map(|s| s.to_string())
        .collect())
}

pub const IDENTITY_FRACTIONS: [f64; 3] = [0.1, 0.2, 0.3];

/// The full list of settings, in a fixed order: baseline; each persona
/// trait replacing the last 1..3 reviewers; area-chair styles; mechanism
/// ablations; the identity grid.
pub fn standard_sweep() -> Vec<ExperimentSetting> {
    let base = SimulationConfig::default();
    let mut out = vec![ExperimentSetting::new("baseline", base.clone())];
    for name in PERSONA_TRAITS {
        for count in 1..=REVIEWERS {
            let mut config = base.clone();
            for j in (REVIEWERS - count + 1)..=REVIEWERS {
                config.reviewers[(j - 1) as usize] = ReviewerProfile::baseline()
                    .with_trait(name)
                    .expect("known trait");
            }
            out.push(ExperimentSetting::new(format!("{name}_{count}"), config));
        }
    }
    for style in [AcStyle::Authoritarian, AcStyle::Conformist, AcStyle::Inclusive] {
        let mut config = base.clone();
        config.ac = style;
        out.push(ExperimentSetting::new(format!("ac_{}", style.as_str()), config));
    }
    let mut no_rebuttal = base.clone();
    no_rebuttal.mechanism.rebuttal_enabled = false;
    out.push(ExperimentSetting::new("no_rebuttal", no_rebuttal));
    let mut no_numeric = base.clone();
    no_numeric.mechanism.numeric_rating_enabled = false;
    out.push(ExperimentSetting::new("no_numeric_rating", no_numeric));
    for k in 1..=REVIEWERS {
        for fraction in IDENTITY_FRACTIONS {
            for stratum in [Stratum::High, Stratum::Low] {
                out.push(ExperimentSetting {
                    name: format!("identity_k{k}_r{}_{}", (fraction * 100.0).round() as u32, stratum.as_str()),
                    config: base.clone(),
                    identity: Some(IdentitySpec {
                        aware_reviewers: k,
                        fraction,
                        stratum,
                    }),
                    baseline_run: None,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReuseDecision {
    Reuse,
    Regenerate,
}

/// Per-artifact reuse decisions against one baseline run, keyed by the
/// artifact's path inside a run (`papers/<id>/<kind>[_<j>].json`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReusePlan {
    pub baseline_run: String,
    pub entries: BTreeMap<String, ReuseDecision>,
}

impl ReusePlan {
    pub fn decision(&self, paper_id: &str, kind: ArtifactKind, index: Option<u8>) -> ReuseDecision {
        RunManifest::artifact_path(paper_id, kind, index)
            .ok()
            .and_then(|k| self.entries.get(&k).copied())
            .unwrap_or(ReuseDecision::Regenerate)
    }

    pub fn reuses(&self, paper_id: &str, kind: ArtifactKind, index: Option<u8>) -> bool {
        self.decision(paper_id, kind, index) == ReuseDecision::Reuse
    }

    pub fn reused_count(&self) -> usize {
        self.entries.values().filter(|d| **d == ReuseDecision::Reuse).count()
    }

    pub fn count(&self, kind: ArtifactKind, decision: ReuseDecision) -> usize {
        self.entries
            .iter()
            .filter(|(path, d)| **d == decision && path.rsplit('/').next().and_then(ArtifactKind::from_file_name).is_some_and(|(k, _)| k == kind))
            .count()
    }
}

/// Identity of the inputs shared by every artifact of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInputs<'a> {
    pub corpus: &'a Corpus,
    pub template_checksum: &'a str,
    pub provider: crate::provider::ProviderIdentity,
}

/// Decides which artifacts of `config` can be taken from `baseline`.
///
/// Review `j` of a paper is reused when reviewer `j` has the same traits,
/// sees the same identity notice on that paper, and the rating flag, seed,
/// temperature, manuscript budget and provider match. Rebuttal `j` follows
/// review `j`. Discussion and meta-review need every earlier artifact of the
/// paper reused and the same area-chair style and mechanisms; a batch
/// decision needs every meta-review of the batch reused and the same quota
/// parameters.
pub fn compute_reuse(
    config: &SimulationConfig,
    inputs: &RunInputs<'_>,
    baseline: &RunManifest,
) -> Result<ReusePlan, ExperimentError> {
    if baseline.status != RunStatus::Complete {
        return Err(ExperimentError::BaselineIncomplete(baseline.run_id.clone()));
    }
    if baseline.corpus_hash != inputs.corpus.content_hash() {
        return Err(ExperimentError::IncompatibleBaseline("corpus content hash differs".into()));
    }
    if baseline.template_checksum != inputs.template_checksum {
        return Err(ExperimentError::IncompatibleBaseline("template checksum differs".into()));
    }
    let base = &baseline.config;
    let shared = baseline.provider == inputs.provider
        && base.seed == config.seed
        && base.temperature == config.temperature
        && base.max_manuscript_chars == config.max_manuscript_chars
        && base.mechanism.numeric_rating_enabled == config.mechanism.numeric_rating_enabled;
    let downstream_same = base.ac == config.ac && base.mechanism == config.mechanism;
    let rebuttals = base.mechanism.rebuttal_enabled && config.mechanism.rebuttal_enabled;

    let mut plan = ReusePlan {
        baseline_run: baseline.run_id.clone(),
        entries: BTreeMap::new(),
    };
    let mut put = |pid: &str, kind: ArtifactKind, index: Option<u8>, reuse: bool| {
        let path = RunManifest::artifact_path(pid, kind, index).expect("valid artifact key");
        plan.entries.insert(path, if reuse { ReuseDecision::Reuse } else { ReuseDecision::Regenerate });
    };
    let mut meta_reused = BTreeMap::new();
    for paper in inputs.corpus.papers() {
        let pid = paper.id.as_str();
        let mut all_upstream = true;
        for j in 1..=REVIEWERS {
            let (mine, theirs) = (config.reviewer(j), base.reviewer(j));
            let review = shared
                && mine.traits() == theirs.traits()
                && config.identity_notice_shown(pid, j) == base.identity_notice_shown(pid, j);
            put(pid, ArtifactKind::Phase1Review, Some(j), review);
            all_upstream &= review;
            if config.mechanism.rebuttal_enabled {
                let rebuttal = review && rebuttals;
                put(pid, ArtifactKind::Phase2Rebuttal, Some(j), rebuttal);
                all_upstream &= rebuttal;
            }
        }
        let downstream = all_upstream && downstream_same;
        if config.mechanism.rebuttal_enabled {
            put(pid, ArtifactKind::Phase3Transcript, None, downstream);
            for j in 1..=REVIEWERS {
                put(pid, ArtifactKind::Phase3Updated, Some(j), downstream);
            }
        }
        put(pid, ArtifactKind::Phase4Metareview, None, downstream);
        meta_reused.insert(pid.to_string(), downstream);
    }
    let ids: Vec<String> = inputs.corpus.ids().map(String::from).collect();
    let quota_same = base.acceptance_rate == config.acceptance_rate && base.batch_size == config.batch_size;
    for (_, batch) in batches(&ids, config.batch_size) {
        let reuse = quota_same && batch.iter().all(|id| meta_reused[id]);
        for id in &batch {
            put(id, ArtifactKind::Decision, None, reuse);
        }
    }
    Ok(plan)
}

/// Run-level switches.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub pipeline: PipelineOptions,
    /// Continue this run instead of starting a new one.
    pub resume_run: Option<String>,
    /// Copy baseline bytes in place of link stubs after the run.
    pub materialize: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub manifest: RunManifest,
    pub states: Vec<PaperSimState>,
    pub reuse: Option<ReusePlan>,
}

/// Runs one setting end to end. The manifest is written before any
/// artifact; on failure the run is marked failed and can be resumed.
pub fn run_experiment(
    setting: &ExperimentSetting,
    corpus: &Corpus,
    templates: &PromptTemplateSet,
    provider: &dyn ChatProvider,
    store: &Store,
    options: &RunOptions,
) -> Result<RunOutcome, ExperimentError> {
    let config = setting.resolve(corpus)?;
    let inputs = RunInputs {
        corpus,
        template_checksum: templates.checksum(),
        provider: provider.identity(),
    };

    let baseline = match &setting.baseline_run {
        Some(id) => {
            let handle = store.open_run(id)?;
            let plan = compute_reuse(&config, &inputs, &handle.manifest())?;
            Some((handle, plan))
        }
        None => None,
    };

    let run = match &options.resume_run {
        Some(id) => {
            let run = store.open_run(id)?;
            let m = run.manifest();
            let mismatch = |reason: &str| ExperimentError::ResumeMismatch {
                run_id: id.clone(),
                reason: reason.to_string(),
            };
            if m.config != config {
                return Err(mismatch("configuration differs"));
            }
            if m.corpus_hash != corpus.content_hash() {
                return Err(mismatch("corpus differs"));
            }
            if m.template_checksum != templates.checksum() {
                return Err(mismatch("templates differ"));
            }
            if m.provider != inputs.provider {
                return Err(mismatch("provider differs"));
            }
            if m.baseline_run != setting.baseline_run {
                return Err(mismatch("baseline differs"));
            }
            run
        }
        None => store.create_run(RunManifest::new(
            setting.name.clone(),
            config.clone(),
            inputs.provider.clone(),
            corpus.content_hash(),
            templates.checksum(),
            corpus.ids().map(String::from).collect(),
            setting.baseline_run.clone(),
        ))?,
    };
    log::info!("run {} ({}) on {} papers", run.run_id(), setting.name, corpus.len());

    let reuse = baseline.as_ref().map(|(handle, plan)| ReuseSource { baseline: handle, plan });
    let sim = Simulation::new(&config, templates, provider)
        .with_options(options.pipeline.clone())
        .with_run(&run)
        .with_reuse(reuse);
    let states = match sim.run_all(corpus) {
        Ok(states) => states,
        Err(e) => {
            if let Err(fin) = run.finalize(RunStatus::Failed, Some(e.to_string())) {
                log::error!("could not record failure: {fin}");
            }
            return Err(e.into());
        }
    };
    let mut manifest = run.finalize(RunStatus::Complete, None)?;
    if options.materialize && run.materialize()? > 0 {
        manifest = run.manifest();
    }
    Ok(RunOutcome {
        run_id: manifest.run_id.clone(),
        manifest,
        states,
        reuse: baseline.map(|(_, plan)| plan),
    })
}

/// Runs `settings` in order. The setting named `baseline` (if any) runs
/// first and every other setting without its own baseline reuses it.
pub fn run_sweep(
    settings: &[ExperimentSetting],
    corpus: &Corpus,
    templates: &PromptTemplateSet,
    provider: &dyn ChatProvider,
    store: &Store,
    options: &RunOptions,
    parallel_settings: bool,
) -> Result<Vec<(String, String)>, ExperimentError> {
    check_unique_names(settings)?;
    let mut out = Vec::with_capacity(settings.len());
    let mut baseline_id = None;
    if let Some(base) = settings.iter().find(|s| s.name == "baseline") {
        let outcome = run_experiment(base, corpus, templates, provider, store, options)?;
        baseline_id = Some(outcome.run_id.clone());
        out.push((base.name.clone(), outcome.run_id));
    }
    let rest: Vec<ExperimentSetting> = settings
        .iter()
        .filter(|s| s.name != "baseline")
        .cloned()
        .map(|mut s| {
            if s.baseline_run.is_none() {
                s.baseline_run = baseline_id.clone();
            }
            s
        })
        .collect();
    if parallel_settings {
        let results: Vec<Result<RunOutcome, ExperimentError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = rest
                .iter()
                .map(|s| scope.spawn(move || run_experiment(s, corpus, templates, provider, store, options)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("setting thread panicked")).collect()
        });
        for (s, r) in rest.iter().zip(results) {
            out.push((s.name.clone(), r?.run_id));
        }
    } else {
        for s in &rest {
            let outcome = run_experiment(s, corpus, templates, provider, store, options)?;
            out.push((s.name.clone(), outcome.run_id));
        }
    }
    Ok(out)
}

fn check_unique_names(settings: &[ExperimentSetting]) -> Result<(), ExperimentError> {
    let mut seen = BTreeSet::new();
    for s in settings {
        if !seen.insert(s.name.as_str()) {
            return Err(ExperimentError::Spec(format!("duplicate setting name `{}`", s.name)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum SettingsField {
    Token(String),
    List(Vec<ExperimentSetting>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSpec {
    settings: SettingsField,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    only: Option<Vec<String>>,
}

/// Parses an experiment spec file. `settings` is either the string
/// `"standard_sweep"` or a list of settings; `seed` overrides every
/// config's seed and `only` keeps the named settings.
pub fn parse_experiment_spec(text: &str) -> Result<Vec<ExperimentSetting>, ExperimentError> {
    let spec: ExperimentSpec = serde_json::from_str(text).map_err(|e| ExperimentError::Spec(e.to_string()))?;
    let mut settings = match spec.settings {
        SettingsField::Token(t) if t == "standard_sweep" => standard_sweep(),
        SettingsField::Token(t) => return Err(ExperimentError::Spec(format!("unknown settings token `{t}`"))),
        SettingsField::List(list) => list,
    };
    if let Some(seed) = spec.seed {
        for s in &mut settings {
            s.config.seed = seed;
        }
    }
    if let Some(only) = spec.only {
        for name in &only {
            if !settings.iter().any(|s| &s.name == name) {
                return Err(ExperimentError::Spec(format!("unknown setting `{name}` in `only`")));
            }
        }
        settings.retain(|s| only.contains(&s.name));
    }
    check_unique_names(&settings)?;
    Ok(settings)
}
