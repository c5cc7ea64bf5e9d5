use clap::Parser;
use semux_core::experiment::{self, Command, ExperimentConfig, RunOptions};
use std::path::PathBuf;
use std::process::ExitCode;

/// Semantic multiplexing experiments.
#[derive(Parser, Debug)]
#[command(name = "semux", version)]
struct Args {
    /// train, eval, adapt, sweep-scalability, sweep-beta or selftest
    command: String,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Load checkpoints written for a different configuration.
    #[arg(long)]
    force: bool,
}

fn run(args: Args) -> semux_core::Result<()> {
    let command: Command = args.command.parse()?;
    let cfg = args.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let opts = RunOptions { seed: args.seed, out_dir: args.out, force: args.force, threads: None };
    let outcome = experiment::run(command, cfg.as_ref(), &opts)?;
    println!("{}", outcome.summary);
    for a in &outcome.artifacts {
        println!("wrote {}", a.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semux: {e}");
            ExitCode::FAILURE
        }
    }
}
