//! Command-line experiment runner for the GPSSM library.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{classify_exit, cmd_benchmark, cmd_fit, cmd_generate, cmd_oracle};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "gpssm", about = "GPSSM variational inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cap internal parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the kink benchmark dataset.
    Generate,
    /// Fit a posterior variant and write grid/pairs/trace/report files.
    Fit,
    /// Time trajectory sampling across sequence lengths.
    Benchmark,
    /// Run the bound and non-Markovianity oracles.
    Oracle,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("config error: {e}");
                return ExitCode::from(2);
            }
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(threads) = cli.threads.or(cfg.threads) {
        cfg.threads = Some(threads);
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    }

    let run = || -> gpssm::Result<bool> {
        match cli.command {
            Command::Generate => cmd_generate(&cfg).map(|_| false),
            Command::Fit => cmd_fit(&cfg).map(|_| false),
            Command::Benchmark => cmd_benchmark(&cfg).map(|_| false),
            Command::Oracle => cmd_oracle(&cfg),
        }
    };
    match run() {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("oracle violation detected");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify_exit(&e))
        }
    }
}
