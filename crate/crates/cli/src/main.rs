//! `lptb`: dataset generation, training, evaluation, gradient checks,
//! backend benchmarks and ablation grids.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lptb::Precision;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "lptb", version, about = "Liquid-inspired relaxation detector toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one dotted key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Write into an existing non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Seed for data, initialization, shuffling and benchmark inputs.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Worker threads (ablation cells only; kernels are single-threaded).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector on a dataset's train split.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a dataset's test split.
    Eval {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Forward latency of each backend.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Latency against sequence length for one backend.
    Scaling {
        #[command(flatten)]
        common: Common,
    },
    /// Run ablation grids: backend, decay_sharing, dt, pyramid_depth or all.
    Ablate {
        #[arg(long, value_name = "NAME", value_delimiter = ',', required = true)]
        which: Vec<String>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Train grid cells concurrently (timings become unreliable).
        #[arg(long)]
        parallel_grid: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every parameter group, in 64-bit.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse()
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.set)?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(p) = self.precision {
            cfg.set_precision(p);
        }
        if self.threads == Some(0) {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        Ok(cfg)
    }

    fn single_threaded(&self, what: &str) -> Result<(), CliError> {
        match self.threads {
            Some(n) if n != 1 => Err(CliError::Usage(format!("{what} runs on one thread, got --threads {n}"))),
            _ => Ok(()),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common } => {
            common.single_threaded("generate")?;
            commands::generate(&common.resolve()?, &common.out, common.force)
        }
        Command::Train { data, common } => {
            common.single_threaded("training")?;
            commands::train(&common.resolve()?, &data, &common.out, common.force)
        }
        Command::Eval {
            data,
            checkpoint,
            common,
        } => {
            common.single_threaded("evaluation")?;
            commands::eval(&common.resolve()?, &data, &checkpoint, &common.out, common.force)
        }
        Command::Bench { common } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = common.threads {
                cfg.bench.thread_count = n;
            }
            commands::bench(&cfg, &common.out, common.force)
        }
        Command::Scaling { common } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = common.threads {
                cfg.bench.thread_count = n;
            }
            commands::scaling(&cfg, &common.out, common.force)
        }
        Command::Ablate {
            which,
            data,
            parallel_grid,
            common,
        } => {
            let mut cfg = common.resolve()?;
            match (parallel_grid, common.threads) {
                (false, Some(n)) if n > 1 => {
                    return Err(CliError::Usage("--threads > 1 needs --parallel-grid".into()));
                }
                (true, Some(n)) => cfg.ablation.workers = n,
                (true, None) => cfg.ablation.workers = 0,
                _ => {}
            }
            commands::ablate(&cfg, &which, &data, &common.out, common.force)
        }
        Command::Gradcheck { common } => {
            common.single_threaded("gradcheck")?;
            let mut cfg = common.resolve()?;
            if cfg.precision != Precision::F64 {
                eprintln!("gradcheck always runs in f64");
            }
            cfg.set_precision(Precision::F64);
            commands::gradcheck(&cfg, &common.out, common.force)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
