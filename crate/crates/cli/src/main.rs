//! `reviewsim` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use reviewsim::analysis::AnalysisError;
use reviewsim::corpus::CorpusError;
use reviewsim::experiments::ExperimentError;
use reviewsim::pipeline::PipelineError;
use reviewsim::store::StoreError;
use reviewsim::ProviderError;

#[derive(Debug, Parser)]
#[command(name = "reviewsim", version, about = "Simulate conference peer review with language-model agents")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Inspect, sample or generate corpus files.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Run one setting, a spec file or the standard sweep.
    Run(RunArgs),
    /// Write the report bundle for a finished run.
    Analyze(AnalyzeArgs),
    /// List runs in a store.
    Runs(StoreArg),
}

#[derive(Debug, Subcommand)]
enum CorpusCommand {
    /// Check a corpus file and print its category counts.
    Validate { path: PathBuf },
    /// Draw a stratified sample into a new corpus file.
    Sample {
        path: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus (reference category counts by default).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Reject,poster,spotlight,oral counts.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderKind {
    Mock,
    Remote,
}

#[derive(Debug, Args)]
struct ProviderArgs {
    #[arg(long, value_enum, default_value_t = ProviderKind::Mock)]
    provider: ProviderKind,
    /// JSON provider config for `--provider remote`.
    #[arg(long)]
    provider_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StoreArg {
    /// Store root directory.
    #[arg(long, default_value = "runs")]
    store: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// A setting from the standard sweep, e.g. `baseline` or `malicious_1`.
    #[arg(long, conflicts_with_all = ["sweep", "spec", "resume"])]
    setting: Option<String>,
    /// Run every setting of a named sweep.
    #[arg(long, value_parser = ["standard"], conflicts_with_all = ["spec", "resume"])]
    sweep: Option<String>,
    /// Experiment spec file (JSON).
    #[arg(long, conflicts_with = "resume")]
    spec: Option<PathBuf>,
    /// Continue an interrupted run.
    #[arg(long)]
    resume: Option<String>,
    /// Completed run to reuse artifacts from.
    #[arg(long)]
    baseline: Option<String>,
    /// Override every setting's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    store: StoreArg,
    #[command(flatten)]
    provider: ProviderArgs,
    /// Prompt template directory replacing the built-in set.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Save every rendered prompt next to the artifacts.
    #[arg(long)]
    capture_prompts: bool,
    /// Replace link stubs with copies of the baseline bytes.
    #[arg(long)]
    materialize: bool,
    /// Run non-baseline settings of a sweep concurrently.
    #[arg(long)]
    parallel_settings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Ratings,
    Agreement,
    Histograms,
    Words,
    Similarity,
    Reasons,
    All,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    run: String,
    #[arg(long)]
    baseline_run: Option<String>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    metrics: Vec<Metric>,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    /// Reason category file (JSON) replacing the default lists.
    #[arg(long)]
    categories: Option<PathBuf>,
    /// Compare meta-reviews with initial instead of post-discussion reviews.
    #[arg(long)]
    initial_reviews: bool,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[command(flatten)]
    store: StoreArg,
    #[command(flatten)]
    provider: ProviderArgs,
}

/// Failures that map onto the documented exit codes.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("run {0} is not complete")]
    Incomplete(String),
}

fn pipeline_code(err: &PipelineError) -> u8 {
    match err {
        PipelineError::Config(_) => 1,
        PipelineError::Provider { .. } | PipelineError::ParseFailure { .. } => 3,
        _ => 2,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => 1,
                CliError::Data(_) => 2,
                CliError::Incomplete(_) => 4,
            };
        }
        if cause.downcast_ref::<ProviderError>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return pipeline_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ExperimentError>() {
            return match e {
                ExperimentError::Pipeline(p) => pipeline_code(p),
                ExperimentError::Spec(_) => 1,
                ExperimentError::BaselineIncomplete(_) => 4,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<AnalysisError>() {
            return match e {
                AnalysisError::Provider(_) => 3,
                AnalysisError::MissingDecision(_) => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<CorpusError>().is_some() || cause.downcast_ref::<StoreError>().is_some() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Corpus(cmd) => commands::corpus(cmd, cli.json),
        Command::Run(args) => commands::run(args, cli.json),
        Command::Analyze(args) => commands::analyze(args, cli.json),
        Command::Runs(args) => commands::runs(args, cli.json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
