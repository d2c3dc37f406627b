use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod stages;

use stages::Stage;

/// Meta re-weighting with clustering-based meta-sample selection.
///
/// Each stage reads its predecessors' files from the output directory and
/// records what it wrote in `manifest.json` there.
#[derive(Parser)]
#[command(name = "metasel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). The built-in toy config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for single-seed stages; defaults to the first configured seed.
    /// Restricts `experiment` to this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out`, then `metasel-out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load the clean dataset.
    GenData(Common),
    /// Apply the configured imbalance and label corruption.
    Corrupt(Common),
    /// Train with a random warm-up meta set and keep checkpoints.
    Warmup(Common),
    /// Compute per-sample gradient features from the warm-up checkpoints.
    Featurize {
        #[command(flatten)]
        common: Common,
        /// rbc, gbc or plain_kmeans; defaults to the first configured one.
        #[arg(long)]
        method: Option<String>,
    },
    /// Choose the meta set.
    Select {
        #[command(flatten)]
        common: Common,
        /// Any method; defaults to the first configured clustering method.
        #[arg(long)]
        method: Option<String>,
    },
    /// Train with the selected meta set.
    Reweight(Common),
    /// Accuracy and weight quality of the re-weighted run.
    Eval(Common),
    /// Objective, bound and stability checks on the selection features.
    Verify(Common),
    /// Every configured method on every seed, with summary tables.
    Experiment(Common),
    /// Print the effective config.
    Config(Common),
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let load = |c: &Common| Stage::load(c.config.as_deref(), c.seed, c.out.as_deref());
    match cli.command {
        Command::GenData(c) => load(&c)?.gen_data()?,
        Command::Corrupt(c) => load(&c)?.corrupt()?,
        Command::Warmup(c) => load(&c)?.warmup()?,
        Command::Featurize { common, method } => load(&common)?.featurize(method.as_deref())?,
        Command::Select { common, method } => load(&common)?.select(method.as_deref())?,
        Command::Reweight(c) => load(&c)?.reweight()?,
        Command::Eval(c) => load(&c)?.eval()?,
        Command::Verify(c) => return load(&c)?.verify(),
        Command::Experiment(c) => load(&c)?.experiment(c.seed)?,
        Command::Config(c) => print!("{}", load(&c)?.text),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: verification failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
