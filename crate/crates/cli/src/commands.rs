use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use reviewsim::analysis::{categorize_reasons, review_metareview_similarity, write_report, CategorySpec, RunData};
use reviewsim::corpus::{load_corpus, stratified_sample, synthetic_corpus, Corpus, DecisionCategory, REFERENCE_COUNTS};
use reviewsim::experiments::{parse_experiment_spec, run_experiment, run_sweep, standard_sweep, ExperimentSetting, RunOptions};
use reviewsim::pipeline::{load_states, PipelineOptions};
use reviewsim::store::{RunStatus, Store};
use reviewsim::{ChatProvider, MockProvider, PromptTemplateSet, ProviderConfig, RemoteProvider, RunManifest};

use crate::{AnalyzeArgs, CliError, CorpusCommand, Metric, ProviderArgs, ProviderKind, RunArgs, StoreArg};

fn emit(json_mode: bool, value: &Value, text: impl FnOnce() -> String) {
    if json_mode {
        println!("{}", serde_json::to_string_pretty(value).expect("json output"));
    } else {
        println!("{}", text());
    }
}

fn category_counts(corpus: &Corpus) -> BTreeMap<&'static str, usize> {
    DecisionCategory::ALL.iter().map(|c| (c.as_str(), corpus.count(*c))).collect()
}

fn describe(corpus: &Corpus) -> String {
    let parts: Vec<String> = DecisionCategory::ALL
        .iter()
        .map(|c| format!("{}: {}", c.as_str(), corpus.count(*c)))
        .collect();
    format!("{} papers ({})", corpus.len(), parts.join(", "))
}

pub fn corpus(cmd: CorpusCommand, json_mode: bool) -> Result<()> {
    match cmd {
        CorpusCommand::Validate { path } => {
            let corpus = load_corpus(&path)?;
            emit(json_mode, &json!({"papers": corpus.len(), "counts": category_counts(&corpus)}), || describe(&corpus));
        }
        CorpusCommand::Sample { path, n, seed, out } => {
            let corpus = load_corpus(&path)?;
            let sample = stratified_sample(&corpus, n, seed)?;
            sample.save(&out)?;
            emit(
                json_mode,
                &json!({"papers": sample.len(), "counts": category_counts(&sample), "out": out}),
                || format!("wrote {} to {}", describe(&sample), out.display()),
            );
        }
        CorpusCommand::Synth { out, counts, seed } => {
            let counts: Vec<(DecisionCategory, usize)> = match counts {
                Some(c) if c.len() == REFERENCE_COUNTS.len() => REFERENCE_COUNTS.iter().map(|(cat, _)| *cat).zip(c).collect(),
                Some(_) => return Err(CliError::Usage("--counts takes reject,poster,spotlight,oral".into()).into()),
                None => REFERENCE_COUNTS.to_vec(),
            };
            let corpus = synthetic_corpus(&counts, seed);
            corpus.save(&out)?;
            emit(
                json_mode,
                &json!({"papers": corpus.len(), "counts": category_counts(&corpus), "out": out}),
                || format!("wrote {} to {}", describe(&corpus), out.display()),
            );
        }
    }
    Ok(())
}

fn templates(dir: Option<&Path>) -> Result<PromptTemplateSet> {
    match dir {
        Some(d) => PromptTemplateSet::load_dir(d).map_err(|e| CliError::Data(format!("templates: {e}")).into()),
        None => Ok(PromptTemplateSet::builtin()),
    }
}

/// The mock is seeded with the simulation seed so that reuse and resume
/// see the same outputs as the run that produced the artifacts.
fn provider(args: &ProviderArgs, seed: u64) -> Result<Box<dyn ChatProvider>> {
    Ok(match args.provider {
        ProviderKind::Mock => Box::new(MockProvider::new(seed)),
        ProviderKind::Remote => {
            let config = match &args.provider_config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    let mut config: ProviderConfig =
                        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("provider config: {e}")))?;
                    if let Ok(url) = std::env::var(reviewsim::provider::BASE_URL_ENV) {
                        if !url.trim().is_empty() {
                            config.base_url = url.trim().trim_end_matches('/').to_string();
                        }
                    }
                    config
                }
                None => ProviderConfig::from_env(),
            };
            Box::new(RemoteProvider::from_env(config)?)
        }
    })
}

fn unlinked(m: &RunManifest) -> usize {
    m.artifacts.values().filter(|e| e.link.is_none()).count()
}

fn selected_settings(args: &RunArgs, store: &Store) -> Result<Vec<ExperimentSetting>> {
    let mut settings = if let Some(id) = &args.resume {
        let m = store.load_manifest(id)?;
        vec![ExperimentSetting {
            name: m.setting_name,
            config: m.config,
            identity: None,
            baseline_run: m.baseline_run,
        }]
    } else if let Some(name) = &args.setting {
        let setting = standard_sweep()
            .into_iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| CliError::Usage(format!("unknown setting `{name}`; see the standard sweep for names")))?;
        vec![setting]
    } else if args.sweep.is_some() {
        standard_sweep()
    } else if let Some(path) = &args.spec {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        parse_experiment_spec(&text)?
    } else {
        return Err(CliError::Usage("one of --setting, --sweep, --spec or --resume is required".into()).into());
    };
    if let Some(seed) = args.seed {
        if args.resume.is_some() {
            return Err(CliError::Usage("--seed cannot change a resumed run".into()).into());
        }
        for s in &mut settings {
            s.config.seed = seed;
        }
    }
    if let Some(base) = &args.baseline {
        if args.resume.is_some() {
            return Err(CliError::Usage("--baseline cannot change a resumed run".into()).into());
        }
        if settings.len() > 1 {
            settings.retain(|s| s.name != "baseline");
        }
        for s in &mut settings {
            s.baseline_run = Some(base.clone());
        }
    }
    Ok(settings)
}

pub fn run(args: RunArgs, json_mode: bool) -> Result<()> {
    let store = Store::open(&args.store.store)?;
    let settings = selected_settings(&args, &store)?;
    let corpus = load_corpus(&args.corpus)?;
    let templates = templates(args.templates.as_deref())?;
    let seed = settings.first().map(|s| s.config.seed).unwrap_or_default();
    if args.provider.provider == ProviderKind::Mock && settings.iter().any(|s| s.config.seed != seed) {
        return Err(CliError::Usage("the mock provider needs one seed for every setting".into()).into());
    }
    let provider = provider(&args.provider, seed)?;
    let options = RunOptions {
        pipeline: PipelineOptions {
            workers: args.workers.max(1),
            capture_prompts: args.capture_prompts,
            ..Default::default()
        },
        resume_run: args.resume.clone(),
        materialize: args.materialize,
    };

    if settings.len() == 1 {
        let before = match &args.resume {
            Some(id) => unlinked(&store.open_run(id)?.manifest()),
            None => 0,
        };
        let outcome = run_experiment(&settings[0], &corpus, &templates, provider.as_ref(), &store, &options)
            .map_err(|e| with_resume_hint(e.into(), &store))?;
        let m = &outcome.manifest;
        let generated = unlinked(m) - before.min(unlinked(m));
        let reused = m.artifacts.len() - unlinked(m);
        let accepted = outcome.states.iter().filter(|s| s.decision.as_ref().is_some_and(|d| d.accept)).count();
        emit(
            json_mode,
            &json!({
                "run_id": outcome.run_id,
                "setting": m.setting_name,
                "status": m.status,
                "papers": outcome.states.len(),
                "accepted": accepted,
                "artifacts_generated": generated,
                "artifacts_reused": reused,
                "tokens": m.token_totals,
            }),
            || {
                format!(
                    "{}\nsetting {}: {} papers, {accepted} accepted\n{generated} artifacts generated, {reused} reused",
                    outcome.run_id,
                    m.setting_name,
                    outcome.states.len()
                )
            },
        );
    } else {
        let runs = run_sweep(&settings, &corpus, &templates, provider.as_ref(), &store, &options, args.parallel_settings)
            .map_err(|e| with_resume_hint(e.into(), &store))?;
        let value: Vec<Value> = runs.iter().map(|(name, id)| json!({"setting": name, "run_id": id})).collect();
        emit(json_mode, &json!({"runs": value}), || {
            runs.iter().map(|(name, id)| format!("{id}  {name}")).collect::<Vec<_>>().join("\n")
        });
    }
    Ok(())
}

fn with_resume_hint(err: anyhow::Error, store: &Store) -> anyhow::Error {
    let failed = store
        .list_runs()
        .ok()
        .and_then(|l| l.runs.into_iter().rev().find(|m| m.status == RunStatus::Failed));
    match failed {
        Some(m) => err.context(format!("run {} stopped; continue it with `--resume {}`", m.run_id, m.run_id)),
        None => err,
    }
}

fn load_run(store: &Store, run_id: &str) -> Result<(RunManifest, RunData)> {
    let manifest = store.load_manifest(run_id)?;
    if manifest.status != RunStatus::Complete {
        return Err(CliError::Incomplete(run_id.to_string()).into());
    }
    let handle = store.open_run(run_id)?;
    let states = load_states(&handle, &manifest.papers)?;
    let data = RunData::new(manifest.setting_name.clone(), manifest.run_id.clone(), states);
    Ok((manifest, data))
}

pub fn analyze(args: AnalyzeArgs, json_mode: bool) -> Result<()> {
    let wants = |m: Metric| args.metrics.contains(&m) || args.metrics.contains(&Metric::All);
    if args.metrics.contains(&Metric::Agreement) && args.baseline_run.is_none() {
        return Err(CliError::Usage("--metrics agreement needs --baseline-run".into()).into());
    }
    let store = Store::open(&args.store.store)?;
    let (manifest, mut primary) = load_run(&store, &args.run)?;
    let baseline = match &args.baseline_run {
        Some(id) => Some(load_run(&store, id)?.1),
        None => None,
    };
    if wants(Metric::Similarity) || wants(Metric::Reasons) {
        let provider = provider(&args.provider, manifest.config.seed)?;
        if wants(Metric::Similarity) {
            primary.similarity = Some(review_metareview_similarity(&primary.states, provider.as_ref(), !args.initial_reviews)?);
        }
        if wants(Metric::Reasons) {
            let spec = match &args.categories {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("category file: {e}")))?
                }
                None => CategorySpec::default(),
            };
            let templates = templates(args.templates.as_deref())?;
            primary.reasons = Some(categorize_reasons(&primary.states, provider.as_ref(), &templates, &spec)?);
        }
    }
    let summary = write_report(&args.out, &primary, baseline.as_ref())?;
    emit(json_mode, &summary, || human_summary(&summary, &args.out));
    Ok(())
}

fn human_summary(summary: &Value, out: &Path) -> String {
    let mut lines = Vec::new();
    let run = &summary["run"];
    lines.push(format!(
        "{} ({}): {} papers, {} accepted",
        run["name"].as_str().unwrap_or("?"),
        run["run_id"].as_str().unwrap_or("?"),
        run["papers"],
        run["accepted"]
    ));
    for phase in ["initial", "final"] {
        let r = &run["ratings"][phase];
        if let (Some(mean), Some(dis)) = (r["mean"].as_f64(), r["inter_reviewer_disagreement"].as_f64()) {
            lines.push(format!("  {phase} ratings: mean {mean:.3}, disagreement {dis:.3}"));
        }
    }
    if let Some(a) = summary.get("agreement") {
        lines.push(format!(
            "  vs baseline: jaccard {:.3}, kappa {:.3}, agree {:.2}%",
            a["jaccard"].as_f64().unwrap_or(0.0),
            a["kappa"].as_f64().unwrap_or(0.0),
            a["percent_agree"].as_f64().unwrap_or(0.0)
        ));
    }
    if let Some(mean) = run["similarity"]["mean"].as_f64() {
        lines.push(format!("  review/meta-review similarity: {mean:.3}"));
    }
    lines.push(format!("report written to {}", out.display()));
    lines.join("\n")
}

pub fn runs(args: StoreArg, json_mode: bool) -> Result<()> {
    let store = Store::open(&args.store)?;
    let listing = store.list_runs()?;
    for w in &listing.warnings {
        eprintln!("warning: {w}");
    }
    let value: Vec<Value> = listing
        .runs
        .iter()
        .map(|m| {
            json!({
                "run_id": m.run_id,
                "setting": m.setting_name,
                "status": m.status,
                "papers": m.papers.len(),
                "artifacts": m.artifacts.len(),
                "baseline_run": m.baseline_run,
            })
        })
        .collect();
    emit(json_mode, &json!({"runs": value}), || {
        listing
            .runs
            .iter()
            .map(|m| {
                let status = serde_json::to_value(m.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                format!("{}  {:<9} {:<24} {} papers", m.run_id, status, m.setting_name, m.papers.len())
            })
            .collect::<Vec<_>>()
            .join("\n")
    });
    Ok(())
}
