//! Batch command line for the saliency pipeline. Every subcommand reads
//! one flat key=value config file; `--seed` and `--out` override the
//! config without editing it.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crpsd::harness::{cmd_eval, cmd_predict, cmd_regions, cmd_train, init_threads, RunConfig};

#[derive(Parser)]
#[command(
    name = "crpsd",
    version,
    about = "Saliency detection from region clustering and map fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (key=value lines).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the region net, then the pixel and fusion nets jointly.
    Train(Common),
    /// Predict region, pixel, and fused saliency maps for a dataset.
    Predict(Common),
    /// Score predicted maps and write the evaluation report.
    Eval(Common),
    /// Export the region segmentation of every image.
    Regions(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c) | Command::Predict(c) | Command::Eval(c) | Command::Regions(c) => c,
        }
    }
}

fn run() -> crpsd::Result<()> {
    let cli = Cli::parse();
    init_threads();
    let common = cli.command.common();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    match cli.command {
        Command::Train(_) => cmd_train(&cfg),
        Command::Predict(_) => cmd_predict(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Regions(_) => cmd_regions(&cfg),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
