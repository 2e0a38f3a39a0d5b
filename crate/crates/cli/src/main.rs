//! `convemo`: data preparation, annotation, staged training, evaluation,
//! ablations and report output.
//!
//! Exit codes: 0 success, 1 bad flags or config, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use convemo_core::annotator::{annotate_with_stats, read_transcripts, AnnotationCache, RetryPolicy};
use convemo_core::checkpoint::StageTag;
use convemo_core::corpus::{load_conversations_with_stats, LabelSpace, LabelSpaceKind};
use convemo_core::evalkit::BarChart;
use convemo_core::pipeline::{
    ablate_fusion, ablate_merged, annotation_policy, build_report, make_backend, run_pipeline, AnnotationConfig, ExperimentConfig,
    ExperimentData, ExperimentReport,
};
use convemo_core::synthetic::{generate, SyntheticKind, SyntheticSpec};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] convemo_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

/// Config problems found before any side effect are the caller's fault.
fn user(e: convemo_core::Error) -> CliError {
    CliError::Usage(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "convemo", version, about = "Staged speech-text emotion recognition in conversations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (with an experiment.toml), or normalize a
    /// conversations file.
    Prepare {
        #[arg(long, value_parser = parse_kind)]
        synthetic: Option<SyntheticKind>,
        /// Raw conversations JSONL (when not generating).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, value_parser = parse_label_space)]
        label_space: Option<LabelSpaceKind>,
        #[arg(long, default_value_t = 2000)]
        conversations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pseudo-label transcripts with an LLM backend.
    Annotate {
        /// `{"id","text"}` JSONL.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "mock")]
        backend: String,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotate and pre-train the text encoder (the pretrain stage).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one stage, or every stage listed in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_stage)]
        stage: Option<StageTag>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score the checkpoints of an experiment and rewrite its report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fusion-kind or hierarchical-vs-merged ablation on existing checkpoints.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: AblationKind,
        /// Seeds `seed, seed+1, ...` for the merged ablation.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print an experiment report, or render bar-chart CSV.
    Report {
        #[arg(long)]
        experiment: Option<PathBuf>,
        /// Bar-chart CSV written by `ablate`.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationKind {
    Fusion,
    Merged,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
    Chart,
}

fn parse_kind(s: &str) -> std::result::Result<SyntheticKind, String> {
    s.parse().map_err(|e: convemo_core::Error| e.to_string())
}

fn parse_label_space(s: &str) -> std::result::Result<LabelSpaceKind, String> {
    s.parse().map_err(|e: convemo_core::Error| e.to_string())
}

fn parse_stage(s: &str) -> std::result::Result<StageTag, String> {
    s.parse().map_err(|e: convemo_core::Error| e.to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| convemo_core::Error::io(dir, e).into())
}

/// Loads and validates the config; `--out` wins over `out_dir`.
fn experiment(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut c = ExperimentConfig::load(config).map_err(user)?;
    if let Some(s) = seed {
        c = c.with_seed(s);
    }
    let dir = out
        .or_else(|| c.out_dir.clone())
        .ok_or_else(|| CliError::Usage("no experiment directory: pass --out or set out_dir".into()))?;
    Ok((c, dir))
}

fn load_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    Ok(ExperimentData::load(config)?)
}

fn prepare(
    synthetic: Option<SyntheticKind>,
    input: Option<PathBuf>,
    label_space: Option<LabelSpaceKind>,
    conversations: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    match (synthetic, input) {
        (Some(kind), None) => {
            if conversations < 10 {
                return Err(CliError::Usage("--conversations must be at least 10".into()));
            }
            let data = generate(&SyntheticSpec::new(kind, conversations, seed)).map_err(user)?;
            data.write_to(out)?;
            ExperimentConfig::for_synthetic(kind, seed).write(&out.join("experiment.toml"))?;
            println!(
                "wrote {} conversations ({} utterances) of the {kind} corpus to {}",
                data.dataset.conversations.len(),
                data.dataset.num_utterances(),
                out.display()
            );
            Ok(())
        }
        (None, Some(input)) => {
            let ls = label_space.ok_or_else(|| CliError::Usage("--label-space is required with --in".into()))?;
            let (dataset, stats) = load_conversations_with_stats(&input, LabelSpace::new(ls))?;
            create_dir(out)?;
            dataset.write_jsonl(&out.join("conversations.jsonl"))?;
            println!(
                "kept {} conversations / {} utterances; dropped {} utterances and {} conversations",
                stats.conversations, stats.utterances, stats.dropped_utterances, stats.dropped_conversations
            );
            Ok(())
        }
        _ => Err(CliError::Usage("prepare needs exactly one of --synthetic or --in".into())),
    }
}

fn annotate(input: &Path, backend: &str, cache: Option<PathBuf>, out: &Path) -> Result<()> {
    let transcripts = read_transcripts(input).map_err(user)?;
    let config = AnnotationConfig { backend: backend.to_string(), ..AnnotationConfig::default() };
    let client = make_backend(&config).map_err(user)?;
    create_dir(out)?;
    let mut cache = match cache {
        Some(p) => AnnotationCache::open(&p)?,
        None => AnnotationCache::in_memory(),
    };
    let policy: RetryPolicy = annotation_policy(&config, backend);
    let (corpus, stats) = annotate_with_stats(&transcripts, client.as_ref(), &mut cache, &policy)?;
    corpus.write_jsonl(&out.join("pseudo_labels.jsonl"))?;
    println!(
        "labeled {} of {} transcripts ({} failed); {} backend calls, {} cache hits",
        corpus.len(),
        transcripts.len(),
        corpus.failed_ids.len(),
        stats.backend_calls,
        stats.cache_hits
    );
    Ok(())
}

fn train(config: &Path, stage: Option<StageTag>, out: Option<PathBuf>, seed: Option<u64>, only: Option<StageTag>) -> Result<()> {
    let (mut c, dir) = experiment(config, out, seed)?;
    if let Some(s) = only.or(stage) {
        c = c.with_stages(vec![s]);
    }
    let data = load_data(&c)?;
    let report = run_pipeline(&c, &data, &dir)?;
    print!("{}", report.to_table());
    Ok(())
}

fn evaluate(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let (c, dir) = experiment(config, out, seed)?;
    let data = load_data(&c)?;
    let previous = ExperimentReport::load(&dir).map(|r| r.frozen_checks).unwrap_or_default();
    let report = build_report(&c, &data, &dir, previous)?;
    report.save(&dir)?;
    print!("{}", report.to_table());
    Ok(())
}

fn ablate(config: &Path, kind: AblationKind, seeds: u64, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let (c, dir) = experiment(config, out, seed)?;
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let data = load_data(&c)?;
    let (report, stem) = match kind {
        AblationKind::Fusion => (ablate_fusion(&c, &data, &dir)?, "ablation_fusion"),
        AblationKind::Merged => {
            let list: Vec<u64> = (0..seeds).map(|i| c.seed + i).collect();
            (ablate_merged(&c, &data, &dir, &list)?, "ablation_merged")
        }
    };
    report.save(&dir, stem)?;
    print!("{}", report.to_chart().render(40));
    Ok(())
}

fn report(experiment: Option<PathBuf>, input: Option<PathBuf>, format: Format) -> Result<()> {
    let text = match (experiment, input) {
        (Some(dir), None) => {
            let r = ExperimentReport::load(&dir)?;
            match format {
                Format::Table => r.to_table(),
                Format::Json => r.to_json()? + "\n",
                Format::Csv => r.to_csv(),
                Format::Chart => r.to_chart().render(40),
            }
        }
        (None, Some(csv)) => {
            let body = fs::read_to_string(&csv).map_err(|e| convemo_core::Error::io(&csv, e))?;
            let title = csv.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
            let chart = BarChart::from_csv(&title, &body)?;
            match format {
                Format::Csv => chart.to_csv(),
                Format::Json => chart.to_json()? + "\n",
                Format::Table | Format::Chart => chart.render(40),
            }
        }
        _ => return Err(CliError::Usage("report needs exactly one of --experiment or --in".into())),
    };
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { synthetic, input, label_space, conversations, seed, out } => {
            prepare(synthetic, input, label_space, conversations, seed, &out)
        }
        Command::Annotate { input, backend, cache, out } => annotate(&input, &backend, cache, &out),
        Command::Pretrain { config, out, seed } => train(&config, None, out, seed, Some(StageTag::Pretrain)),
        Command::Train { config, stage, out, seed } => train(&config, stage, out, seed, None),
        Command::Evaluate { config, out, seed } => evaluate(&config, out, seed),
        Command::Ablate { config, kind, seeds, out, seed } => ablate(&config, kind, seeds, out, seed),
        Command::Report { experiment, input, format } => report(experiment, input, format),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `convemo --help` for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
