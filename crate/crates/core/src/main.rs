use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use icdaug::benchmark::{self, BenchmarkConfig, Lexicon};
use icdaug::config::RunConfig;
use icdaug::dataset::Split;
use icdaug::gateway::{ChatTransport, RecordFailure};
use icdaug::pipeline::{self, PipelineError, Variant};
use icdaug::simulate::{SimulatedTransport, SimulatedWriter};

#[derive(Parser)]
#[command(name = "icdaug", version, about = "ICD-10 corpus augmentation and coding evaluation")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Acknowledge that sending notes to the configured endpoint is permitted.
    #[arg(long = "i-have-data-clearance", global = true)]
    clearance: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose families and generation codes.
    Select,
    /// Build the silver-standard generation plan.
    Plan,
    /// Send the plan through the endpoint (or replay fixtures).
    Generate(SimArgs),
    /// Extract codes, scrub mentions, write the synthetic corpus.
    Postprocess,
    /// Append synthetic documents to the training split.
    Merge,
    /// Train the linear coder on the base or augmented corpus.
    Train {
        #[arg(long, default_value = "base")]
        variant: Variant,
    },
    /// Write predictions of a trained model.
    Predict {
        #[arg(long, default_value = "base")]
        variant: Variant,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Score predictions against gold labels.
    Evaluate {
        /// Prediction JSONL; defaults to the variant's predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "base")]
        variant: Variant,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output file stem inside out_dir.
        #[arg(long)]
        name: Option<String>,
    },
    /// Train base and augmented models and compare them.
    Compare,
    /// Ask the endpoint to code real notes and score the result.
    CodeNotes {
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Blinded human review.
    Review {
        #[command(subcommand)]
        command: ReviewCommand,
    },
    /// Reports derived from stored artifacts.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
    /// Word and label distribution CSVs.
    Stats,
    /// Every stage from select to compare.
    Run(SimArgs),
    /// Write a constructed benchmark corpus with its description table.
    Benchmark {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// The smaller 500-document layout.
        #[arg(long)]
        small: bool,
    },
}

#[derive(clap::Args)]
struct SimArgs {
    /// Answer requests in-process from a benchmark lexicon instead of HTTP.
    #[arg(long, value_name = "LEXICON_JSON")]
    simulate: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ReviewCommand {
    /// Serve the review API (and frontend bundle, if configured).
    Serve,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Kappa and mean scores from the review log.
    Agreement {
        /// Allow incomplete sessions.
        #[arg(long)]
        partial: bool,
    },
}

fn transport(sim: &SimArgs) -> Result<Option<Box<dyn ChatTransport>>, PipelineError> {
    let Some(path) = &sim.simulate else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let lexicon: Lexicon = serde_json::from_str(&text).map_err(|e| PipelineError::Data(e.to_string()))?;
    Ok(Some(Box::new(SimulatedTransport(SimulatedWriter::new(
        lexicon,
        BenchmarkConfig::default().noise_words,
    )))))
}

fn print<T: serde::Serialize>(value: &T) -> Result<(), PipelineError> {
    println!("{}", serde_json::to_string_pretty(value).map_err(|e| PipelineError::Data(e.to_string()))?);
    Ok(())
}

/// Artifacts are still written; the exit status reports the failures.
fn failed(failures: &[RecordFailure]) -> Result<(), PipelineError> {
    match failures.first() {
        Some(f) => Err(PipelineError::Endpoint(format!(
            "{} request(s) failed, first {}: {}",
            failures.len(),
            f.plan_id,
            f.error
        ))),
        None => Ok(()),
    }
}

fn write_benchmark(dir: &Path, seed: u64, small: bool) -> Result<(), PipelineError> {
    let cfg = if small {
        BenchmarkConfig::fixture_500(seed)
    } else {
        BenchmarkConfig { seed, ..Default::default() }
    };
    let b = benchmark::generate(&cfg);
    let mut corpus = Vec::new();
    b.corpus.write_jsonl(&mut corpus).map_err(|e| PipelineError::io_at(dir, e))?;
    pipeline::write_atomic(&dir.join("corpus.jsonl"), &corpus)?;
    pipeline::write_atomic(&dir.join("descriptions.csv"), b.descriptions_csv().as_bytes())?;
    let lex = serde_json::to_vec_pretty(&b.lexicon).map_err(|e| PipelineError::Data(e.to_string()))?;
    pipeline::write_atomic(&dir.join("lexicon.json"), &lex)?;
    print(&serde_json::json!({
        "dir": dir.display().to_string(),
        "documents": b.corpus.len(),
        "codes": b.lexicon.titles.len(),
    }))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut overrides = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PipelineError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    if let Command::Benchmark { dir, seed, small } = &cli.command {
        return write_benchmark(dir, *seed, *small);
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    let clearance = cli.clearance;
    match cli.command {
        Command::Select => print(&pipeline::select(&cfg)?),
        Command::Plan => print(&pipeline::plan(&cfg)?),
        Command::Generate(sim) => {
            let (m, report) = pipeline::generate(&cfg, clearance, transport(&sim)?)?;
            print(&m)?;
            failed(&report.failures)
        }
        Command::Postprocess => print(&pipeline::postprocess(&cfg)?),
        Command::Merge => print(&pipeline::merge(&cfg)?),
        Command::Train { variant } => print(&pipeline::train(&cfg, variant)?),
        Command::Predict { variant, split } => print(&pipeline::predict(&cfg, variant, split)?),
        Command::Evaluate {
            predictions,
            variant,
            split,
            name,
        } => {
            let pred = predictions.unwrap_or_else(|| pipeline::predictions_path(&cfg, variant, split));
            let stem = name.unwrap_or_else(|| format!("evaluation_{}", variant.as_str()));
            print(&pipeline::evaluate_file(&cfg, &pred, split, &stem)?.1)
        }
        Command::Compare => print(&pipeline::compare(&cfg)?.1.rows),
        Command::CodeNotes { split, sim } => {
            let (_, report) = pipeline::code_notes(&cfg, split, clearance, transport(&sim)?)?;
            print(&report)?;
            failed(&report.failures)
        }
        Command::Review {
            command: ReviewCommand::Serve,
        } => {
            let store = Arc::new(pipeline::review_store(&cfg)?);
            eprintln!(
                "review: {} documents, log {}, listening on {}",
                store.pool().len(),
                pipeline::review_log_path(&cfg).display(),
                cfg.review_bind
            );
            icdaug::review::serve_blocking(
                store,
                pipeline::session_defaults(&cfg),
                &cfg.review_bind,
                cfg.review_static_dir.as_deref().map(Path::new),
            )
            .map_err(|e| PipelineError::Io {
                path: cfg.review_bind.clone(),
                message: e.to_string(),
            })
        }
        Command::Report {
            command: ReportCommand::Agreement { partial },
        } => print(&pipeline::report_agreement(&cfg, partial)?.1),
        Command::Stats => print(&pipeline::stats(&cfg)?),
        Command::Run(sim) => print(&pipeline::run_all(&cfg, clearance, transport(&sim)?)?),
        Command::Benchmark { .. } => unreachable!("handled before config resolution"),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("ICDAUG_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({"error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code()});
            eprintln!("{body}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
