//! Independent replicas, aggregate statistics and the Lyapunov monitor for
//! large-deviation functionals along particle trajectories.

use rayon::prelude::*;
use relent_core::csv::{fmt_num, CsvTable};
use relent_core::evolve::TrajectoryLog;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{MicroError, Result};

/// Seed of replica `index` (SplitMix64 finalizer of `master + (index + 1) * gamma`).
pub fn replica_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `count` replicas on up to `workers` threads (0 for the default);
/// results come back in replica order.
pub fn run_replicas<T, F>(count: usize, master_seed: u64, workers: usize, run: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| MicroError::InvalidModel(format!("thread pool: {e}")))?;
    pool.install(|| (0..count).into_par_iter().map(|i| run(i, replica_seed(master_seed, i as u64))).collect())
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn check_aligned(logs: &[TrajectoryLog]) -> Result<()> {
    let first = logs.first().ok_or(MicroError::InsufficientReplicas { needed: 1, got: 0 })?;
    for l in logs {
        if l.times != first.times || l.columns != first.columns {
            return Err(MicroError::InvalidModel("replica logs have different times or columns".into()));
        }
    }
    Ok(())
}

/// Mean and standard error across replicas of every column at every time.
pub fn aggregate_csv(logs: &[TrajectoryLog]) -> Result<String> {
    check_aligned(logs)?;
    let cols = &logs[0].columns;
    let header = std::iter::once("t".to_string())
        .chain(cols.iter().flat_map(|c| [format!("{c}_mean"), format!("{c}_stderr")]));
    let mut table = CsvTable::new(header);
    for (k, t) in logs[0].times.iter().enumerate() {
        let mut row = vec![fmt_num(*t)];
        for j in 0..cols.len() {
            let v: Vec<f64> = logs.iter().map(|l| l.rows[k][j]).collect();
            let (m, s) = mean_stderr(&v);
            row.push(fmt_num(m));
            row.push(fmt_num(s));
        }
        table.push(row);
    }
    Ok(table.render())
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovStatistic {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Consecutive increases of the mean larger than `band` combined
    /// standard errors.
    pub increases: usize,
    pub band: f64,
    /// Mean over replicas of the least-squares slope in time, with a 95%
    /// confidence interval from the replica spread.
    pub slope: f64,
    pub slope_ci: (f64, f64),
}

impl LyapunovStatistic {
    /// No increase outside the noise band and a significantly negative trend.
    pub fn decreasing(&self) -> bool {
        self.increases == 0 && self.slope_ci.1 < 0.0
    }

    /// The slope interval contains zero.
    pub fn trendless(&self) -> bool {
        self.slope_ci.0 <= 0.0 && 0.0 <= self.slope_ci.1
    }
}

fn ols_slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let num: f64 = t.iter().zip(y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let den: f64 = t.iter().map(|a| (a - tm) * (a - tm)).sum();
    num / den
}

/// Monitors `column` (a functional of smoothed profiles) across replicas
/// at times in `window` (inclusive); `band` is the noise band in standard
/// errors.
pub fn lyapunov_monitor(logs: &[TrajectoryLog], column: &str, window: (f64, f64), band: f64) -> Result<LyapunovStatistic> {
    if logs.len() < 2 {
        return Err(MicroError::InsufficientReplicas { needed: 2, got: logs.len() });
    }
    check_aligned(logs)?;
    let j = logs[0]
        .column_index(column)
        .ok_or_else(|| MicroError::InvalidModel(format!("column {column} not logged")))?;
    let idx: Vec<usize> = (0..logs[0].times.len())
        .filter(|&k| logs[0].times[k] >= window.0 && logs[0].times[k] <= window.1)
        .collect();
    if idx.len() < 5 {
        return Err(MicroError::InvalidModel(format!("{} logged times in window, at least 5 needed", idx.len())));
    }
    let times: Vec<f64> = idx.iter().map(|&k| logs[0].times[k]).collect();
    let mut mean = Vec::new();
    let mut stderr = Vec::new();
    for &k in &idx {
        let v: Vec<f64> = logs.iter().map(|l| l.rows[k][j]).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(MicroError::InvalidModel(format!("non-finite {column} at t = {}", logs[0].times[k])));
        }
        let (m, s) = mean_stderr(&v);
        mean.push(m);
        stderr.push(s);
    }
    let increases = (1..mean.len())
        .filter(|&k| mean[k] - mean[k - 1] > band * (stderr[k].powi(2) + stderr[k - 1].powi(2)).sqrt())
        .count();
    let slopes: Vec<f64> = logs
        .iter()
        .map(|l| {
            let y: Vec<f64> = idx.iter().map(|&k| l.rows[k][j]).collect();
            ols_slope(&times, &y)
        })
        .collect();
    let (slope, se) = mean_stderr(&slopes);
    let t = StudentsT::new(0.0, 1.0, (slopes.len() - 1) as f64)
        .map_err(|e| MicroError::InvalidModel(format!("t distribution: {e}")))?
        .inverse_cdf(0.975);
    Ok(LyapunovStatistic { times, mean, stderr, increases, band, slope, slope_ci: (slope - t * se, slope + t * se) })
}
