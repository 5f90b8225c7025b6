//! Batch front-end: reads one experiment configuration, runs it and writes
//! CSV/JSON results plus a manifest into an output directory.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod sweep;

use std::path::PathBuf;
use std::time::Instant;

pub use config::{load_config, parse_config, Experiment, RunConfig};
pub use error::{CliError, Result};
pub use experiments::Metrics;
pub use output::{Manifest, Output};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    /// Overrides the seed in the configuration.
    pub seed: Option<u64>,
    /// Worker threads for replicas and sweep points; 0 picks the default.
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub metrics: Metrics,
}

/// Independent seed for stream `stream` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    relent_micro::monitor::replica_seed(seed, stream)
}

/// Runs an already validated configuration into `out`.
pub fn execute(cfg: &RunConfig, seed: u64, workers: usize, out: &mut Output) -> Result<Metrics> {
    let tol = &cfg.tolerances;
    match &cfg.experiment {
        Experiment::Evolve(c) => experiments::evolve(c, false, tol, out),
        Experiment::DecayCertificate(c) => experiments::evolve(c, true, tol, out),
        Experiment::Stationary(c) => experiments::stationary(c, tol, out),
        Experiment::Eigen(c) => experiments::eigen(c, out),
        Experiment::Markov(c) => experiments::markov(c, &cfg.base_dir, tol, out),
        Experiment::Systems(c) => experiments::systems(c, tol, out),
        Experiment::Zrp(c) => experiments::zrp(c, seed, workers, out),
        Experiment::Gl(c) => experiments::gl(c, seed, workers, out),
        Experiment::Sweep(c) => sweep::run_sweep(c, &cfg.base_dir, seed, workers, out),
    }
}

/// Loads, validates and runs a configuration file. Schema errors leave the
/// output directory untouched; numeric failures keep partial outputs and
/// still write `manifest.json`.
pub fn run(opts: &RunOptions) -> Result<RunSummary> {
    let text = std::fs::read_to_string(&opts.config)
        .map_err(|e| CliError::Schema(format!("cannot read {}: {e}", opts.config.display())))?;
    let base_dir = opts.config.parent().map(PathBuf::from).unwrap_or_default();
    let cfg = parse_config(&text, &base_dir)?;
    let seed = opts.seed.or(cfg.seed).unwrap_or(0);
    let start_time = chrono::Utc::now().to_rfc3339();
    let clock = Instant::now();
    let mut out = Output::create(&opts.out)?;
    let result = execute(&cfg, seed, opts.workers, &mut out);
    let manifest = Manifest {
        config_hash: output::config_hash(&text),
        seed,
        kind: cfg.experiment.kind().to_string(),
        start_time,
        elapsed: clock.elapsed().as_secs_f64(),
        outputs: out.files().to_vec(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: if result.is_ok() { "ok" } else { "failed" }.to_string(),
        error: result.as_ref().err().map(|e| e.to_string()),
    };
    out.json("manifest.json", &manifest)?;
    result.map(|metrics| RunSummary { manifest, metrics })
}
