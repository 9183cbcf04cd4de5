//! distillery: build staged distillation datasets from unlabeled queries.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use distillery_core::config::{PipelineConfig, SamplerStrategy};
use distillery_core::gateway::server::{MockRegistry, MockServer};
use distillery_core::model::{read_jsonl_str, Query};
use distillery_core::stages::{step_sequence, Pipeline, StageError};

/// Exit codes by error category, also listed in `--help`.
const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING_INPUT: u8 = 3;
const EXIT_PROVIDER: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(
    name = "distillery",
    version,
    about = "Multi-teacher distillation dataset pipeline",
    after_help = "Exit codes: 0 success, 2 configuration error, 3 missing input artifact, \
                  4 provider error, 5 io error."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every pipeline command.
#[derive(Args, Clone)]
struct RunFlags {
    /// Pipeline configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory for artifacts, manifest, and the default cache.
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Swap every provider for its seeded in-process mock.
    #[arg(long)]
    mock: bool,
    /// Seed for mock providers (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Cache directory (defaults to <out-dir>/cache).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Skip steps whose artifacts already verify against the manifest.
    #[arg(long)]
    resume: bool,
    /// Override the confidence threshold s.
    #[arg(long)]
    threshold: Option<f64>,
    /// Override the sampler: confidence, log_probability, or hard_rejection.
    #[arg(long)]
    sampler: Option<String>,
    /// Override the number of compression rounds.
    #[arg(long)]
    compression_rounds: Option<u32>,
    /// Reject annotations whose self-reported confidence deviates from the
    /// factor recomputation.
    #[arg(long)]
    strict_confidence: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate teacher annotations for a query file.
    Generate {
        #[command(flatten)]
        flags: RunFlags,
        /// Queries as JSON Lines (defaults to the config's `queries` path).
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Quality + diversity selection over generated annotations.
    Select {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Student inference for one compression round.
    InferStudent {
        #[command(flatten)]
        flags: RunFlags,
        /// Round index (1-based).
        #[arg(long, default_value_t = 1)]
        round: u32,
    },
    /// Teacher-guided refinement for one compression round.
    Compress {
        #[command(flatten)]
        flags: RunFlags,
        /// Round index (1-based).
        #[arg(long, default_value_t = 1)]
        round: u32,
    },
    /// Build the stage dataset files from selection and compression output.
    BuildStages {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Emit report.json / report.md / histogram.csv / sweep.csv.
    Report {
        #[command(flatten)]
        flags: RunFlags,
        /// Recompute every reported number from the artifacts and fail on
        /// any mismatch.
        #[arg(long)]
        verify: bool,
    },
    /// Run the whole pipeline end to end.
    Run {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Stop after the named step (one of the manifest step names).
        #[arg(long)]
        stop_after: Option<String>,
    },
    /// Serve the config's providers as mocks over an OpenAI-compatible
    /// HTTP API.
    MockServe {
        /// Pipeline configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Bind address.
        #[arg(long, default_value = "127.0.0.1:8316")]
        bind: String,
        /// Seed for the served mocks.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Delete cache entries not referenced by any of the given runs.
    Gc {
        /// Cache directory to collect.
        #[arg(long)]
        cache_dir: PathBuf,
        /// Run directories whose manifests pin live entries.
        #[arg(long = "run-dir", required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] distillery_core::config::ConfigError),
    #[error("{0}")]
    BadFlag(String),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error("cannot read queries `{path}`: {source}")]
    Queries {
        path: String,
        source: std::io::Error,
    },
    #[error("no queries file: pass --queries or set `queries` in the config")]
    NoQueries,
    #[error("{0}")]
    Io(String),
}

fn exit_code_for(err: &CliError) -> u8 {
    match err {
        CliError::Config(_) | CliError::BadFlag(_) => EXIT_CONFIG,
        CliError::NoQueries => EXIT_MISSING_INPUT,
        CliError::Queries { .. } => EXIT_MISSING_INPUT,
        CliError::Io(_) => EXIT_IO,
        CliError::Stage(stage) => match stage {
            StageError::Config(_) | StageError::ManifestMismatch { .. } => EXIT_CONFIG,
            StageError::MissingInput { .. } => EXIT_MISSING_INPUT,
            StageError::Gateway(_) | StageError::Embed(_) => EXIT_PROVIDER,
            StageError::MissingProvider(_) | StageError::UnknownRefiner(_) => EXIT_CONFIG,
            _ => EXIT_IO,
        },
    }
}

/// Loads the config and applies CLI overrides.
fn load_config(flags: &RunFlags) -> Result<PipelineConfig, CliError> {
    let mut config = PipelineConfig::load(&flags.config)?;
    if let Some(t) = flags.threshold {
        config.threshold = t;
    }
    if let Some(sampler) = &flags.sampler {
        config.sampler = match sampler.as_str() {
            "confidence" => SamplerStrategy::Confidence,
            "log_probability" => SamplerStrategy::LogProbability,
            "hard_rejection" => SamplerStrategy::HardRejection,
            other => {
                return Err(CliError::BadFlag(format!(
                    "unknown sampler `{other}` (expected confidence, log_probability, or hard_rejection)"
                )))
            }
        };
    }
    if let Some(rounds) = flags.compression_rounds {
        config.compression_rounds = rounds;
    }
    if flags.strict_confidence {
        config.strict_confidence = true;
    }
    if let Some(seed) = flags.seed {
        config.seed = seed;
    }
    if flags.mock {
        let seed = config.seed;
        config = config.with_mock_providers(seed);
    }
    distillery_core::validate_config(&config)
        .map_err(distillery_core::config::ConfigError::Invalid)?;
    Ok(config)
}

fn open_pipeline(flags: &RunFlags) -> Result<Pipeline, CliError> {
    let config = load_config(flags)?;
    Ok(Pipeline::open(
        config,
        &flags.out_dir,
        flags.cache_dir.clone(),
        flags.resume,
    )?)
}

fn load_queries_file(
    flags: &RunFlags,
    explicit: Option<&PathBuf>,
    config: &PipelineConfig,
) -> Result<Vec<Query>, CliError> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => match &config.queries {
            Some(rel) => flags
                .config
                .parent()
                .unwrap_or_else(|| std::path::Path::new("."))
                .join(rel),
            None => return Err(CliError::NoQueries),
        },
    };
    let text = std::fs::read_to_string(&path).map_err(|source| CliError::Queries {
        path: path.display().to_string(),
        source,
    })?;
    read_jsonl_str(&text).map_err(|e| CliError::Io(e.to_string()))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate { flags, queries } => {
            let mut pipeline = open_pipeline(&flags)?;
            let queries = load_queries_file(&flags, queries.as_ref(), &pipeline.config)?;
            pipeline.step_inputs(&queries)?;
            pipeline.step_annotations()?;
            let annotations = pipeline.load_annotations()?;
            let failures = pipeline.load_failures()?;
            println!(
                "generated {} annotations ({} failures) in {}",
                annotations.len(),
                failures.len(),
                flags.out_dir.display()
            );
            Ok(())
        }
        Command::Select { flags } => {
            let mut pipeline = open_pipeline(&flags)?;
            pipeline.step_selection()?;
            let report = pipeline.load_selection_report()?;
            println!(
                "selected {} samples (sampler {}, {} quality-rejected, {} diversity-dropped)",
                report.counts.final_kept,
                report.sampler,
                report.counts.quality_rejected,
                report.counts.diversity_dropped
            );
            Ok(())
        }
        Command::InferStudent { flags, round } => {
            let mut pipeline = open_pipeline(&flags)?;
            pipeline.step_student(round)?;
            let responses = pipeline.load_student_responses(round)?;
            println!("student produced {} responses for round {round}", responses.len());
            Ok(())
        }
        Command::Compress { flags, round } => {
            let mut pipeline = open_pipeline(&flags)?;
            pipeline.step_compress(round)?;
            let meta = pipeline.load_round_meta(round)?;
            println!(
                "round {round}: mean rationale tokens {} -> {} ({} refinement failures)",
                meta.rationale_tokens_before.mean,
                meta.rationale_tokens_after.mean,
                meta.refinement_failures
            );
            Ok(())
        }
        Command::BuildStages { flags } => {
            let mut pipeline = open_pipeline(&flags)?;
            pipeline.step_stages()?;
            for dataset in pipeline.load_all_stage_datasets()? {
                println!("stage {} -> {} records", dataset.stage, dataset.records.len());
            }
            Ok(())
        }
        Command::Report { flags, verify } => {
            let mut pipeline = open_pipeline(&flags)?;
            pipeline.step_report()?;
            if verify {
                pipeline.verify_report()?;
                println!("report verified: every count matches the artifacts");
            } else {
                println!(
                    "report written under {}",
                    flags.out_dir.join("report").display()
                );
            }
            Ok(())
        }
        Command::Run {
            flags,
            queries,
            stop_after,
        } => {
            let mut pipeline = open_pipeline(&flags)?;
            if let Some(step) = &stop_after {
                let known = step_sequence(pipeline.config.compression_rounds);
                if !known.contains(step) {
                    return Err(CliError::BadFlag(format!(
                        "unknown step `{step}` (expected one of: {})",
                        known.join(", ")
                    )));
                }
            }
            let queries = load_queries_file(&flags, queries.as_ref(), &pipeline.config)?;
            pipeline.run_all(&queries, stop_after.as_deref())?;
            for step in &pipeline.manifest().steps {
                println!("step {:<12} {} artifact(s)", step.step, step.artifacts.len());
            }
            println!("run {} complete in {}", pipeline.manifest().run_id, flags.out_dir.display());
            Ok(())
        }
        Command::MockServe { config, bind, seed } => {
            let mut config = PipelineConfig::load(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let registry = MockRegistry::from_config(&config);
            let server = MockServer::start(registry, &bind).map_err(|e| CliError::Io(e.to_string()))?;
            println!("serving mock providers on {}", server.base_url());
            println!("POST chat/completions and embeddings accepted; Ctrl-C to stop");
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        Command::Gc { cache_dir, run_dirs } => {
            let mut referenced = std::collections::BTreeSet::new();
            for dir in &run_dirs {
                let manifest_path = dir.join("manifest.json");
                let manifest = distillery_core::manifest::RunManifest::load(&manifest_path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", manifest_path.display())))?;
                referenced.extend(manifest.cache_keys);
            }
            let store = distillery_core::cache::CacheStore::open(&cache_dir);
            let removed = store.gc(&referenced).map_err(|e| CliError::Io(e.to_string()))?;
            println!("removed {removed} unreferenced cache entries");
            Ok(())
        }
    }
}
