//! Parameter sweeps: the cartesian product of value lists applied to a base
//! configuration, run concurrently and tabulated in a fixed order.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use relent_core::csv::{fmt_num, CsvTable};

use crate::config::{parse_table, set_path, RunConfig, SweepConfig};
use crate::error::{CliError, Result};
use crate::experiments::Metrics;
use crate::output::Output;
use crate::{derive_seed, execute};

/// Values of each axis at point `index`; the last axis varies fastest.
fn point_values(axes: &[(String, Vec<toml::Value>)], mut index: usize) -> Vec<toml::Value> {
    let mut vals = vec![toml::Value::Boolean(false); axes.len()];
    for (k, (_, list)) in axes.iter().enumerate().rev() {
        vals[k] = list[index % list.len()].clone();
        index /= list.len();
    }
    vals
}

/// Expands the sweep into validated configurations, one per point.
pub fn expand(sc: &SweepConfig, base_dir: &Path) -> Result<Vec<(Vec<toml::Value>, RunConfig)>> {
    let axes = sc.axes()?;
    let count = sc.point_count()?;
    (0..count)
        .map(|i| {
            let vals = point_values(&axes, i);
            let mut table = sc.base.clone();
            for ((name, _), v) in axes.iter().zip(&vals) {
                set_path(&mut table, name, v.clone())?;
            }
            let cfg = parse_table(table, base_dir).map_err(|e| CliError::Schema(format!("sweep point {i}: {e}")))?;
            Ok((vals, cfg))
        })
        .collect()
}

fn cell(v: &toml::Value) -> String {
    let s = match v {
        toml::Value::Float(f) => fmt_num(*f),
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    clean(&s)
}

/// Keeps a free-text field on one CSV cell.
fn clean(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

struct PointResult {
    seed: u64,
    outcome: Result<Metrics>,
    files: Vec<String>,
}

pub fn run_sweep(sc: &SweepConfig, base_dir: &Path, seed: u64, workers: usize, out: &mut Output) -> Result<Metrics> {
    let axes = sc.axes()?;
    let points = expand(sc, base_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Numeric(format!("thread pool: {e}")))?;
    let root = out.dir().to_path_buf();
    let results: Vec<PointResult> = pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(i, (_, cfg))| {
                let s = derive_seed(seed, i as u64);
                match Output::create(&root.join(format!("points/{i:05}"))) {
                    Ok(mut o) => {
                        let outcome = execute(cfg, s, 1, &mut o);
                        PointResult { seed: s, outcome, files: o.files().to_vec() }
                    }
                    Err(e) => PointResult { seed: s, outcome: Err(e), files: Vec::new() },
                }
            })
            .collect()
    });
    let metric_names: BTreeSet<&String> =
        results.iter().filter_map(|r| r.outcome.as_ref().ok()).flat_map(|m| m.keys()).collect();
    let mut header = vec!["point".to_string(), "seed".to_string()];
    header.extend(axes.iter().map(|(n, _)| n.clone()));
    header.push("status".into());
    header.extend(metric_names.iter().map(|s| s.to_string()));
    header.push("error".into());
    let mut table = CsvTable::new(header);
    let mut failed = 0usize;
    for (i, ((vals, _), r)) in points.iter().zip(&results).enumerate() {
        let mut row = vec![i.to_string(), r.seed.to_string()];
        row.extend(vals.iter().map(cell));
        match &r.outcome {
            Ok(m) => {
                row.push("ok".into());
                row.extend(metric_names.iter().map(|k| m.get(*k).map_or(String::new(), |v| fmt_num(*v))));
                row.push(String::new());
            }
            Err(e) => {
                failed += 1;
                row.push("failed".into());
                row.extend(metric_names.iter().map(|_| String::new()));
                row.push(clean(&e.to_string()));
            }
        }
        table.push(row);
        out.adopt(&format!("points/{i:05}"), &r.files);
    }
    out.write("sweep.csv", &table.render())?;
    Ok(Metrics::from([("points".to_string(), points.len() as f64), ("failed".to_string(), failed as f64)]))
}
