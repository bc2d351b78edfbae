use std::path::PathBuf;

use clap::{Parser, Subcommand};

mod commands;

/// Endoluminal camera localization toolkit: generate airway trees, simulate
/// observation streams with exact ground truth, track, and evaluate.
#[derive(Parser)]
#[command(name = "lumentrack", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an airway tree JSON from a scenario config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize the ground-truth path and recorded observations.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track a recorded observation stream and write trajectory + summary.
    Track {
        #[arg(long)]
        config: PathBuf,
        /// Directory produced by `simulate` (observations + tree + gt).
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Join a trajectory CSV with a ground-truth CSV and summarize.
    Eval {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Summary JSON output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the benchmark matrix (clean, noisy, blackout and ablation runs).
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Base seed for the matrix.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seeds per scenario.
        #[arg(long, default_value_t = 3)]
        seeds_per_case: usize,
        /// Parallel scenario jobs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out, seed } => commands::generate(&config, &out, seed),
        Command::Simulate { config, out, seed } => commands::simulate(&config, &out, seed),
        Command::Track {
            config,
            observations,
            out,
            seed,
        } => commands::track(&config, &observations, &out, seed),
        Command::Eval {
            trajectory,
            gt,
            out,
        } => commands::eval(&trajectory, &gt, out.as_deref()),
        Command::Bench {
            out,
            seed,
            seeds_per_case,
            jobs,
        } => commands::bench(&out, seed, seeds_per_case, jobs),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(commands::exit_code(&err));
        }
    }
}
