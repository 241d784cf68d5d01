//! `shaperefine` command-line pipeline.
//!
//! Exit status: 0 when every subject succeeded, 2 when some failed (see
//! `manifest.json`), 1 on configuration or input errors.

mod commands;
mod config;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::RunReport;
use config::{ConfigError, ConfigResult, PipelineConfig};
use store::Writer;

#[derive(Parser)]
#[command(name = "shaperefine", version, about = "Cardiac segmentation refinement pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic high-resolution cohort.
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Degrade high-resolution subjects into thick-slice, motion-shifted stacks.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<PathBuf>,
    },
    /// Train the multi-task classifier.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<PathBuf>,
    },
    /// Full refinement of low-resolution subjects.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<PathBuf>,
        #[arg(long)]
        atlases: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score segmentations against a reference cohort.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Rank atlases for each subject.
    SelectAtlases {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<PathBuf>,
        #[arg(long)]
        atlases: Option<PathBuf>,
    },
    /// Register the selected atlases to each subject and write the warped atlases.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<PathBuf>,
        #[arg(long)]
        atlases: Option<PathBuf>,
    },
    /// Fuse the warped atlases written by `register`.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<PathBuf>,
    },
}

fn load(common: &Common) -> ConfigResult<PipelineConfig> {
    let mut cfg = PipelineConfig::load(common.config.as_deref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.out.is_some() {
        cfg.output_dir = common.out.clone();
    }
    if common.workers.is_some() {
        cfg.worker_count = common.workers;
    }
    Ok(cfg)
}

fn set_opt(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
    if v.is_some() {
        *slot = v.clone();
    }
}

fn run(cli: Cli) -> ConfigResult<(RunReport, Writer)> {
    let cfg = match &cli.command {
        Command::Phantom { common, count } => {
            let mut cfg = load(common)?;
            if count.is_some() {
                cfg.phantom_count = *count;
            }
            cfg
        }
        Command::Simulate { common, subjects }
        | Command::Train { common, subjects }
        | Command::Fuse { common, subjects } => {
            let mut cfg = load(common)?;
            set_opt(&mut cfg.subject_dir, subjects);
            cfg
        }
        Command::SelectAtlases { common, subjects, atlases } | Command::Register { common, subjects, atlases } => {
            let mut cfg = load(common)?;
            set_opt(&mut cfg.subject_dir, subjects);
            set_opt(&mut cfg.atlas_dir, atlases);
            cfg
        }
        Command::Refine {
            common,
            subjects,
            atlases,
            model,
        } => {
            let mut cfg = load(common)?;
            set_opt(&mut cfg.subject_dir, subjects);
            set_opt(&mut cfg.atlas_dir, atlases);
            set_opt(&mut cfg.model_path, model);
            cfg
        }
        Command::Evaluate { common, pred, reference } => {
            let mut cfg = load(common)?;
            set_opt(&mut cfg.subject_dir, pred);
            set_opt(&mut cfg.reference_dir, reference);
            cfg
        }
    };
    cfg.validate()?;
    if let Some(n) = cfg.workers()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError(format!("cannot start {n} workers: {e}")))?;
    }
    match cli.command {
        Command::Phantom { .. } => commands::phantom(&cfg, cfg.phantom_count.unwrap_or(20)),
        Command::Simulate { .. } => commands::simulate(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Refine { .. } => commands::refine_cmd(&cfg),
        Command::Evaluate { .. } => commands::evaluate(&cfg),
        Command::SelectAtlases { .. } => commands::select_cmd(&cfg),
        Command::Register { .. } => commands::register_cmd(&cfg),
        Command::Fuse { .. } => commands::fuse_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (report, writer) = match run(cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let report = match report.finish(&writer) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: writing manifest: {e:#}");
            return ExitCode::from(1);
        }
    };
    for f in &report.failed {
        eprintln!("failed: {}: {}", f.subject, f.error);
    }
    if report.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}
