use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use reid_cli::commands::{self, EvalSource, IngestSource, Overrides, SweepParam};
use reid_cli::provenance::RunRecord;
use reid_cli::{CliError, ExperimentConfig, Result};
use reid_core::datasets::Layout;
use reid_core::eval::KernelChoice;

#[derive(Debug, Parser)]
#[command(name = "reid", version, about = "Multi-head incremental person re-identification")]
struct Cli {
    /// Experiment config (JSON, validated against the bundled schema).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ranking implementation: reference | native.
    #[arg(long, global = true)]
    kernel: Option<KernelChoice>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan a dataset tree and write a manifest plus summary counts.
    Ingest {
        /// Dataset root; without it every configured task is ingested.
        #[arg(long, requires = "layout")]
        root: Option<PathBuf>,
        #[arg(long)]
        layout: Option<Layout>,
    },
    /// Train one phase of the incremental protocol.
    Train {
        #[arg(long)]
        phase: usize,
        /// Continue from this phase's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate embedding files or a checkpoint.
    Eval {
        #[arg(long, requires = "gallery", conflicts_with = "checkpoint")]
        query: Option<PathBuf>,
        #[arg(long, requires = "query")]
        gallery: Option<PathBuf>,
        /// Defaults to the latest phase checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the query/gallery descriptors as embedding files here.
        #[arg(long)]
        emit_embeddings: Option<PathBuf>,
    },
    /// Train and evaluate every task in order, re-evaluating earlier tasks.
    RunIncremental,
    /// One run per value of a hyperparameter.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        /// Run the points concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::RunIncremental => "run-incremental",
            Command::Sweep { .. } => "sweep",
        }
    }
}

fn need<'a>(cfg: Option<&'a ExperimentConfig>, command: &str) -> Result<&'a ExperimentConfig> {
    cfg.ok_or_else(|| CliError::Usage(format!("{command} needs --config")))
}

fn dispatch(command: &Command, cfg: Option<&ExperimentConfig>, out: &Path, ov: &Overrides) -> Result<Vec<PathBuf>> {
    match command {
        Command::Ingest { root, layout } => match (root, layout) {
            (Some(root), Some(layout)) => commands::ingest(IngestSource::Tree { root, layout: *layout }, out),
            _ => commands::ingest(IngestSource::Config(need(cfg, "ingest without --root")?), out),
        },
        Command::Train { phase, resume } => commands::train(need(cfg, "train")?, *phase, *resume),
        Command::Eval {
            query,
            gallery,
            checkpoint,
            emit_embeddings,
        } => {
            let source = match (query, gallery) {
                (Some(query), Some(gallery)) => EvalSource::Embeddings { query, gallery },
                _ => EvalSource::Checkpoint {
                    cfg: need(cfg, "eval without --query/--gallery")?,
                    path: checkpoint.as_deref(),
                    emit_embeddings: emit_embeddings.as_deref(),
                },
            };
            commands::eval(source, out, ov)
        }
        Command::RunIncremental => commands::run_incremental(need(cfg, "run-incremental")?),
        Command::Sweep {
            param,
            values,
            parallel,
        } => {
            let values = commands::parse_values(values)?;
            commands::sweep(need(cfg, "sweep")?, *param, &values, *parallel)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        kernel: cli.kernel,
    };
    let loaded = cli
        .config
        .as_deref()
        .map(|p| {
            let mut cfg = ExperimentConfig::load(p)?;
            ov.apply(&mut cfg)?;
            Ok(cfg)
        })
        .transpose();
    let (cfg, early) = match loaded {
        Ok(cfg) => (cfg, None),
        Err(e) => (None, Some(e)),
    };
    let out = cfg
        .as_ref()
        .map_or_else(|| ov.out_or_default(), |c| c.output_dir.clone());

    let mut record = RunRecord::start(cli.command.name(), cfg.as_ref());
    let result = match early {
        Some(e) => Err(e),
        None => dispatch(&cli.command, cfg.as_ref(), &out, &ov),
    };
    let code = match result {
        Ok(outputs) => {
            record.outputs = outputs;
            record.finish(0, None);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            record.finish(code, Some(e.to_string()));
            code
        }
    };
    let code = match record.write(&out) {
        Ok(_) => code,
        Err(e) => {
            eprintln!("error: cannot write run record: {e}");
            if code == 0 {
                1
            } else {
                code
            }
        }
    };
    ExitCode::from(code as u8)
}
