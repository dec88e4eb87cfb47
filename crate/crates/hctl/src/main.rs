use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hctl::{run_file, Overrides, Task};

/// Runs one h-control experiment and writes its artifacts.
#[derive(Parser, Debug)]
#[command(name = "hctl", version)]
struct Cli {
    /// train, toy-fig, sweep, gibbs-oracle, locality or ablate.
    task: Task,
    /// JSON experiment config; unset fields take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding `seeds.master`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-seed fan-out.
    #[arg(long, env = "HCTL_THREADS", default_value_t = 0)]
    threads: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides { out_dir: cli.out, seed: cli.seed };
    match run_file(cli.task, &cli.config, &overrides, cli.threads) {
        Ok(rec) => {
            println!("wrote {} artifacts to {}", rec.artifacts.len(), rec.config.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hctl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
