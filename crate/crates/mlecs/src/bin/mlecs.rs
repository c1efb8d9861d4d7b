//! Thin CLI over the `mlecs` library. Logging level comes from the
//! `MLECS_LOG` environment variable (`error`, `info`, `debug`).

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "mlecs",
    about = "Deterministic edge-cloud collaborative multimodal learning simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured experiment and write its artifacts.
    Run {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dotted-key overrides, e.g. --set train.lr=0.1 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory for metrics, summary, and checkpoints.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads for the device phases (default: number of devices).
        #[arg(long)]
        workers: Option<usize>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full gradient-verification suite.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Randomized cases per gradient path.
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Print parameter/byte accounting for the configured and
    /// published-scale models.
    BenchComm {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every mode on a shared seed and emit a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fast end-to-end check battery; exit status 0 iff everything passes.
    Selftest {
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MLECS_LOG", "error"))
        .init();
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Run {
            config,
            set,
            out,
            workers,
            seed,
        } => mlecs::cli::Command::Run {
            config,
            overrides: set,
            out,
            workers,
            seed,
        },
        Cmd::Gradcheck { seed, cases } => mlecs::cli::Command::Gradcheck { seed, cases },
        Cmd::BenchComm { config, set, seed } => mlecs::cli::Command::BenchComm {
            config,
            overrides: set,
            seed,
        },
        Cmd::Ablate {
            config,
            set,
            out,
            workers,
            seed,
        } => mlecs::cli::Command::Ablate {
            config,
            overrides: set,
            out,
            workers,
            seed,
        },
        Cmd::Selftest { seed } => mlecs::cli::Command::Selftest { seed },
    };
    if let Err(e) = mlecs::cli::execute(command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
