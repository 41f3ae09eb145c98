//! CSV tables and a JSON summary for one run, optionally against a baseline.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use super::{
    agreement, decision_map, rating_histogram, rating_stats, relative_reduction, word_count_stats, AnalysisError,
    Histogram, RatingPhase, ReasonDistribution, SimilarityReport, TextKind,
};
use crate::pipeline::PaperSimState;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A loaded run plus whatever provider-backed analyses were computed for it.
#[derive(Debug, Clone)]
pub struct RunData {
    pub name: String,
    pub run_id: String,
    pub states: Vec<PaperSimState>,
    pub similarity: Option<SimilarityReport>,
    pub reasons: Option<ReasonDistribution>,
}

impl RunData {
    pub fn new(name: impl Into<String>, run_id: impl Into<String>, states: Vec<PaperSimState>) -> Self {
        Self {
            name: name.into(),
            run_id: run_id.into(),
            states,
            similarity: None,
            reasons: None,
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), AnalysisError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| AnalysisError::Io { path, source })
}

struct Tables {
    ratings: String,
    agreement: String,
    histograms: String,
    word_counts: String,
    reasons: String,
    similarity: String,
}

impl Tables {
    fn new() -> Self {
        Self {
            ratings: "run,phase,mean,dispersion_across_papers,inter_reviewer_disagreement,papers,ratings\n".into(),
            agreement: "run_a,run_b,papers,jaccard,kappa,percent_agree,decision_change\n".into(),
            histograms: "run,phase,bin_lower,bin_upper,count\n".into(),
            word_counts: "run,kind,count,mean,std\n".into(),
            reasons: "run,side,category,count,proportion\n".into(),
            similarity: "run,paper_id,cosine\n".into(),
        }
    }
}

fn run_section(run: &RunData, tables: &mut Tables) -> Value {
    let mut ratings = serde_json::Map::new();
    for phase in [RatingPhase::Initial, RatingPhase::Final] {
        let Ok(stats) = rating_stats(&run.states, phase) else {
            continue;
        };
        let _ = writeln!(
            tables.ratings,
            "{},{},{},{},{},{},{}",
            run.name,
            phase.as_str(),
            num(stats.mean),
            num(stats.dispersion_across_papers),
            num(stats.inter_reviewer_disagreement),
            stats.papers,
            stats.ratings
        );
        let hist = rating_histogram(&run.states, phase);
        for (i, count) in hist.counts.iter().enumerate() {
            let (lo, hi) = Histogram::bin_bounds(i);
            let _ = writeln!(tables.histograms, "{},{},{lo:.2},{hi:.2},{count}", run.name, phase.as_str());
        }
        ratings.insert(phase.as_str().into(), json!(stats));
    }
    if let (Some(i), Some(f)) = (ratings.get("initial"), ratings.get("final")) {
        let before = i["inter_reviewer_disagreement"].as_f64().unwrap_or(0.0);
        let after = f["inter_reviewer_disagreement"].as_f64().unwrap_or(0.0);
        if before > 0.0 {
            ratings.insert("disagreement_reduction_pct".into(), json!(relative_reduction(before, after)));
        }
    }

    let mut words = serde_json::Map::new();
    for kind in TextKind::ALL {
        if let Ok((mean, std)) = word_count_stats(&run.states, kind) {
            let count = super::word_counts(&run.states, kind).len();
            let _ = writeln!(tables.word_counts, "{},{},{count},{},{}", run.name, kind.as_str(), num(mean), num(std));
            words.insert(kind.as_str().into(), json!({"count": count, "mean": mean, "std": std}));
        }
    }

    let mut section = json!({
        "name": run.name,
        "run_id": run.run_id,
        "papers": run.states.len(),
        "accepted": run.states.iter().filter(|s| s.decision.as_ref().is_some_and(|d| d.accept)).count(),
        "ratings": ratings,
        "word_counts": words,
    });

    if let Some(sim) = &run.similarity {
        for (pid, cos) in &sim.per_paper {
            let _ = writeln!(tables.similarity, "{},{pid},{}", run.name, num(*cos));
        }
        section["similarity"] = json!({"mean": sim.mean, "std": sim.std, "final_reviews": sim.final_reviews});
    }
    if let Some(reasons) = &run.reasons {
        if let ReasonDistribution::Present { accept, reject } = reasons {
            for (side, dist) in [("accept", accept), ("reject", reject)] {
                for s in &dist.shares {
                    let _ = writeln!(tables.reasons, "{},{side},{},{},{}", run.name, s.name, s.count, num(s.proportion));
                }
            }
        }
        section["reasons"] = json!(reasons);
    }
    section
}

/// Writes `ratings.csv`, `agreement.csv`, `histograms.csv`, `word_counts.csv`,
/// `reasons.csv`, `similarity.csv` and `summary.json` into `dir`.
/// Output depends only on the inputs.
pub fn write_report(dir: &Path, run: &RunData, baseline: Option<&RunData>) -> Result<Value, AnalysisError> {
    std::fs::create_dir_all(dir).map_err(|source| AnalysisError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut tables = Tables::new();
    let mut summary = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "run": run_section(run, &mut tables),
    });
    if let Some(base) = baseline {
        summary["baseline"] = run_section(base, &mut tables);
        if !run.states.is_empty() {
            let report = agreement(&decision_map(&base.states)?, &decision_map(&run.states)?)?;
            let _ = writeln!(
                tables.agreement,
                "{},{},{},{},{},{},{}",
                base.name,
                run.name,
                report.papers,
                num(report.jaccard),
                num(report.kappa),
                num(report.percent_agree),
                num(report.decision_change)
            );
            summary["agreement"] = json!(report);
        }
    }
    write_file(dir, "ratings.csv", &tables.ratings)?;
    write_file(dir, "agreement.csv", &tables.agreement)?;
    write_file(dir, "histograms.csv", &tables.histograms)?;
    write_file(dir, "word_counts.csv", &tables.word_counts)?;
    write_file(dir, "reasons.csv", &tables.reasons)?;
    write_file(dir, "similarity.csv", &tables.similarity)?;
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(dir, "summary.json", &format!("{text}\n"))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::tests::state;

    #[test]
    fn empty_run_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &RunData::new("empty", "r0", vec![]), None).unwrap();
        let ratings = std::fs::read_to_string(dir.path().join("ratings.csv")).unwrap();
        assert_eq!(ratings.lines().count(), 1);
        let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["schema_version"], 1);
    }

    #[test]
    fn report_is_deterministic() {
        let run = RunData::new("x", "r1", vec![state("a", [4.0, 5.0, 6.0], true), state("b", [3.0, 3.0, 7.5], false)]);
        let base = RunData::new("base", "r0", vec![state("a", [5.0; 3], true), state("b", [5.0; 3], true)]);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_report(d1.path(), &run, Some(&base)).unwrap();
        write_report(d2.path(), &run, Some(&base)).unwrap();
        for f in ["ratings.csv", "agreement.csv", "histograms.csv", "word_counts.csv", "summary.json"] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let agreement = std::fs::read_to_string(d1.path().join("agreement.csv")).unwrap();
        assert_eq!(agreement.lines().nth(1).unwrap(), "base,x,2,0.500000,0.000000,50.000000,50.000000");
    }
}
