use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use relent_cli::{run, RunOptions};

/// Runs one experiment configuration and writes its results.
#[derive(Debug, Parser)]
#[command(name = "relent", version, about)]
struct Args {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Master seed; overrides `seed` in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replicas and sweep points (0: all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Suppress the summary on stdout.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let opts = RunOptions { config: args.config, out: args.out, seed: args.seed, workers: args.workers };
    match run(&opts) {
        Ok(summary) => {
            if !args.quiet {
                let m = &summary.manifest;
                println!("{} run finished in {:.3} s (seed {})", m.kind, m.elapsed, m.seed);
                for (k, v) in &summary.metrics {
                    println!("  {k} = {v:e}");
                }
                println!("outputs in {}", opts.out.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("relent: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
