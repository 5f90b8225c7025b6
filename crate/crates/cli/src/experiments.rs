//! Execution of each experiment kind. Every runner writes its files through
//! an [`Output`] and returns scalar metrics for the sweep table.

use std::collections::BTreeMap;

use relent_core::csv::{fmt_num, CsvTable};
use relent_core::evolve::{evolve_with_reference, EntropySpec, EvolveFailure, TrajectoryLog};
use relent_core::markov::{classify, evolve_markov, markov_stationary};
use relent_core::spectral::{decay_rate, dirichlet_eigenvalue, fit_rate, DecayCertificate};
use relent_core::stationary::{stationary_csv, stationary_flux};
use relent_core::systems::{
    check_compat_phi, check_compat_psi, check_jacobian, einstein_check, evolve_pair, relax_pair, sum_power_certificate,
    PairField, SampleBox,
};
use relent_core::{solve_stationary, DensityField, DiscreteGenerator, Grid, Nonlinearity, StationaryOptions};
use relent_micro::gl::{simulate_gl, GlOptions, GlRun};
use relent_micro::monitor::{aggregate_csv, lyapunov_monitor, run_replicas};
use relent_micro::site::sample_pair_product_measure;
use relent_micro::zrp::blocks;
use relent_micro::{sample_product_measure, simulate_zrp, Configuration, Species, ZrpOptions, ZrpRun};
use serde::Serialize;

use crate::config::{
    convex_generator, CertificateConfig, EigenConfig, EvolveConfig, GlConfig, MarkovConfig, PairConfig,
    StationaryConfig, SystemsConfig, Tolerances, ZrpConfig,
};
use crate::derive_seed;
use crate::error::{CliError, Result};
use crate::output::Output;

/// Scalar results of a run, keyed by metric name.
pub type Metrics = BTreeMap<String, f64>;

/// Largest per-step increase of `values`, relative to the largest magnitude
/// in the series. Zero for non-increasing series.
pub fn max_relative_increase(values: &[f64]) -> f64 {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    values.windows(2).map(|w| (w[1] - w[0]) / scale).fold(0.0, f64::max)
}

fn entropy_specs(names: &[String]) -> Result<Vec<EntropySpec>> {
    names.iter().map(|n| convex_generator(n).map(EntropySpec::new)).collect()
}

fn is_functional(column: &str) -> bool {
    column.starts_with("H_") || column.starts_with("N_")
}

/// Final values and monotonicity of the logged functionals.
fn log_metrics(log: &TrajectoryLog, metrics: &mut Metrics) {
    if let Some(last) = log.rows.last() {
        for (c, v) in log.columns.iter().zip(last) {
            metrics.insert(format!("final_{c}"), *v);
        }
    }
    for c in log.columns.iter().filter(|c| is_functional(c)) {
        let v = log.column(c).expect("listed column");
        metrics.insert(format!("max_increase_{c}"), max_relative_increase(&v));
    }
}

fn stationary_reference(gen: &DiscreteGenerator, nl: &Nonlinearity, f0: &DensityField, tol: &Tolerances) -> Result<DensityField> {
    let mass = if gen.has_clamped() { None } else { Some(f0.mass(gen.nu())) };
    if mass == Some(0.0) {
        return Ok(DensityField::constant(gen.n(), 0.0));
    }
    let opts = StationaryOptions { tolerance_factor: tol.stationary, mass, ..Default::default() };
    Ok(solve_stationary(gen, nl, f0, None, opts)?.f_inf)
}

/// Per-state masses `sigma(f) nu`.
fn weighted_sigma(nl: &Nonlinearity, f: &DensityField, nu: &[f64]) -> Result<Vec<f64>> {
    f.values.iter().zip(nu).map(|(f, nu)| Ok(nl.eval(*f)? * nu)).collect()
}

fn write_trajectory(out: &mut Output, log: &TrajectoryLog, grid: Option<&Grid>) -> Result<()> {
    out.write("trajectory.csv", &log.to_csv())?;
    if let Some(g) = grid {
        for (k, (_, csv)) in log.snapshot_csvs(&g.centers(), g.dim).iter().enumerate() {
            out.write(&format!("snapshots/snapshot_{k:05}.csv"), csv)?;
        }
    }
    Ok(())
}

/// Writes what a failed run logged and converts the failure.
fn keep_partial(out: &mut Output, failure: EvolveFailure) -> CliError {
    if !failure.log.times.is_empty() {
        if let Err(e) = out.write("trajectory.csv", &failure.log.to_csv()) {
            return e;
        }
    }
    CliError::Numeric(failure.error.to_string())
}

#[derive(Debug, Serialize)]
struct CertificateReport {
    #[serde(flatten)]
    certificate: DecayCertificate,
    column: String,
    window: (f64, f64),
    slack: f64,
    holds: Option<bool>,
    fit_error: Option<String>,
}

fn certify(
    out: &mut Output,
    cert: DecayCertificate,
    log: &TrajectoryLog,
    cc: &CertificateConfig,
    t_end: f64,
    tol: &Tolerances,
    metrics: &mut Metrics,
) -> Result<CertificateReport> {
    let window = cc.window.unwrap_or((0.0, t_end));
    let (certificate, fit_error) = match fit_rate(log, &cc.column, window) {
        Ok(r) => (cert.with_fit(r), None),
        Err(e) => (cert, Some(e.to_string())),
    };
    let holds = certificate.fitted_rate.map(|_| certificate.holds(tol.certificate_slack));
    metrics.insert("lambda_d".into(), certificate.lambda_d);
    metrics.insert("c_k".into(), certificate.c_k);
    metrics.insert("lambda".into(), certificate.lambda);
    if let (Some(r), Some(m)) = (certificate.fitted_rate, certificate.margin) {
        metrics.insert("fitted_rate".into(), r);
        metrics.insert("margin".into(), m);
    }
    let report = CertificateReport {
        certificate,
        column: cc.column.clone(),
        window,
        slack: tol.certificate_slack,
        holds,
        fit_error,
    };
    out.json("certificate.json", &report)?;
    Ok(report)
}

pub fn evolve(c: &EvolveConfig, certificate_required: bool, tol: &Tolerances, out: &mut Output) -> Result<Metrics> {
    let grid = c.grid.build()?;
    let gen = c.grid.generator(&grid)?;
    let nl = c.nonlinearity.build()?;
    let f0 = c.initial.field(&grid, c.boundary.as_ref())?;
    let specs = entropy_specs(&c.entropies)?;
    let stepper = c.time.stepper(tol);
    let reference = stationary_reference(&gen, &nl, &f0, tol)?;
    out.write("stationary.csv", &stationary_csv(&grid.centers(), grid.dim, &reference))?;
    let log = evolve_with_reference(&gen, &nl, &f0, &reference, &stepper, &specs).map_err(|f| keep_partial(out, f))?;
    write_trajectory(out, &log, Some(&grid))?;
    let mut metrics = Metrics::new();
    log_metrics(&log, &mut metrics);
    metrics.insert("newton_iterations".into(), log.newton_iterations as f64);
    let dirichlet = gen.has_clamped();
    let cc = match (&c.certificate, c.nonlinearity.power_exponent()) {
        (Some(cc), Some(_)) => Some(cc.clone()),
        (None, Some(_)) if certificate_required || dirichlet => Some(CertificateConfig::default()),
        _ => None,
    };
    if let (Some(cc), Some(m), true) = (cc, c.nonlinearity.power_exponent(), dirichlet) {
        let cert = decay_rate(&grid, m, &reference)?;
        let report = certify(out, cert, &log, &cc, c.time.t_end, tol, &mut metrics)?;
        if certificate_required {
            if let Some(e) = report.fit_error {
                return Err(CliError::Numeric(format!("rate fit failed: {e}")));
            }
        }
    }
    Ok(metrics)
}

#[derive(Debug, Serialize)]
struct StationaryReport {
    residual_norm: f64,
    tolerance: f64,
    iterations: usize,
    bounds: (f64, f64),
    /// Largest net flux density between neighbouring cells.
    max_flux: f64,
    detailed_balance_residual: f64,
    reversible: bool,
}

pub fn stationary(c: &StationaryConfig, tol: &Tolerances, out: &mut Output) -> Result<Metrics> {
    let grid = c.grid.build()?;
    let gen = c.grid.generator(&grid)?;
    let nl = c.nonlinearity.build()?;
    let guess = match &c.initial {
        Some(i) => Some(i.field(&grid, c.boundary.as_ref())?),
        None => None,
    };
    let boundary = match (&guess, &c.boundary) {
        (Some(g), _) => g.clone(),
        (None, Some(b)) => DensityField::from_fn(&grid, |x| b.at(x, grid.length)),
        (None, None) => DensityField::constant(grid.len(), 1.0),
    };
    let mass = if gen.has_clamped() { None } else { c.mass.or_else(|| guess.as_ref().map(|g| g.mass(gen.nu()))) };
    let opts = StationaryOptions { tolerance_factor: tol.stationary, mass, ..Default::default() };
    let state = solve_stationary(&gen, &nl, &boundary, guess.as_ref(), opts)?;
    out.write("stationary.csv", &stationary_csv(&grid.centers(), grid.dim, &state.f_inf))?;
    let w = weighted_sigma(&nl, &state.f_inf, gen.nu())?;
    let (db, db_scale) = gen.detailed_balance_residual(&w);
    let report = StationaryReport {
        residual_norm: state.residual_norm,
        tolerance: state.tolerance,
        iterations: state.iterations,
        bounds: state.bounds,
        max_flux: stationary_flux(&gen, &nl, &state.f_inf),
        detailed_balance_residual: db,
        reversible: db <= 1e-12 * db_scale.max(f64::MIN_POSITIVE),
    };
    out.json("stationary.json", &report)?;
    Ok(Metrics::from([
        ("residual_norm".to_string(), report.residual_norm),
        ("tolerance".to_string(), report.tolerance),
        ("max_flux".to_string(), report.max_flux),
        ("min_f_inf".to_string(), report.bounds.0),
        ("max_f_inf".to_string(), report.bounds.1),
    ]))
}

#[derive(Debug, Serialize)]
struct EigenReport {
    dim: usize,
    n: usize,
    length: f64,
    lambda_d: f64,
    /// `dim pi^2 / L^2`.
    continuum: f64,
    relative_error: f64,
}

pub fn eigen(c: &EigenConfig, out: &mut Output) -> Result<Metrics> {
    let grid = c.grid()?;
    let lambda_d = dirichlet_eigenvalue(&grid)?;
    let continuum = c.dim as f64 * std::f64::consts::PI.powi(2) / (c.length * c.length);
    let report =
        EigenReport { dim: c.dim, n: c.n, length: c.length, lambda_d, continuum, relative_error: (lambda_d - continuum).abs() / continuum };
    out.json("eigen.json", &report)?;
    Ok(Metrics::from([("lambda_d".to_string(), lambda_d), ("relative_error".to_string(), report.relative_error)]))
}

pub fn markov(c: &MarkovConfig, base_dir: &std::path::Path, tol: &Tolerances, out: &mut Output) -> Result<Metrics> {
    let kernel = c.kernel(base_dir)?;
    let nl = c.nonlinearity.build()?;
    let f0 = DensityField::new(c.initial.clone());
    let state = markov_stationary(&kernel, &nl, &f0)?;
    let mut table = CsvTable::new(["state", "nu", "f_inf"]);
    for (s, (nu, f)) in kernel.nu.iter().zip(&state.f_inf.values).enumerate() {
        table.push(vec![s.to_string(), fmt_num(*nu), fmt_num(*f)]);
    }
    out.write("stationary.csv", &table.render())?;
    let w = weighted_sigma(&nl, &state.f_inf, &kernel.nu)?;
    let class = classify(&w, &kernel)?;
    out.json("classification.json", &class)?;
    let mut metrics = Metrics::from([
        ("stationary".to_string(), f64::from(u8::from(class.stationary))),
        ("reversible".to_string(), f64::from(u8::from(class.reversible))),
        ("stationarity_residual".to_string(), class.stationarity_residual),
        ("reversibility_residual".to_string(), class.reversibility_residual),
    ]);
    if let Some(t) = &c.time {
        let specs = entropy_specs(&c.entropies)?;
        let log = evolve_markov(&kernel, &nl, &f0, &t.stepper(tol), &specs).map_err(|f| keep_partial(out, f))?;
        write_trajectory(out, &log, None)?;
        log_metrics(&log, &mut metrics);
    }
    Ok(metrics)
}

#[derive(Debug, Serialize)]
struct SystemsReport {
    pair: String,
    sample_box: SampleBox,
    compat_phi: relent_core::systems::CompatReport,
    compat_psi: relent_core::systems::CompatReport,
    jacobian: relent_core::systems::JacobianReport,
    einstein: Option<relent_core::systems::EinsteinReport>,
    einstein_error: Option<String>,
}

pub fn systems(c: &SystemsConfig, tol: &Tolerances, out: &mut Output) -> Result<Metrics> {
    let grid = c.grid.build()?;
    let gen = c.grid.generator(&grid)?;
    let pair = c.pair.build()?;
    let f1 = c.initial1.field(&grid, c.boundary1.as_ref())?;
    let f2 = c.initial2.field(&grid, c.boundary2.as_ref())?;
    let pf0 = PairField::new(f1, f2)?;
    let reference = relax_pair(&gen, &pair, &pf0)?;
    let mut table = CsvTable::new(["x", "f1_inf", "f2_inf"]);
    for (x, s) in grid.centers().iter().zip(0..reference.len()) {
        let z = reference.at(s);
        table.push(vec![fmt_num(x[0]), fmt_num(z[0]), fmt_num(z[1])]);
    }
    out.write("stationary.csv", &table.render())?;
    let bx = SampleBox::covering(&pf0, &reference);
    let (einstein, einstein_error) = match einstein_check(&pair, &bx) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let report = SystemsReport {
        pair: pair.label().to_string(),
        sample_box: bx,
        compat_phi: check_compat_phi(&pair, &bx)?,
        compat_psi: check_compat_psi(&pair, &bx)?,
        jacobian: check_jacobian(&pair, &bx),
        einstein,
        einstein_error,
    };
    out.json("compat.json", &report)?;
    let mut metrics = Metrics::from([
        ("compat_phi_mismatch".to_string(), report.compat_phi.max_mismatch),
        ("compat_psi_mismatch".to_string(), report.compat_psi.max_mismatch),
        ("jacobian_min_eigenvalue".to_string(), report.jacobian.min_eigenvalue),
    ]);
    if let Some(e) = &report.einstein {
        metrics.insert("einstein_residual".into(), e.max_residual);
    }
    let mut stepper = c.time.stepper(tol);
    stepper.store_densities = false;
    let log = evolve_pair(&gen, &pair, &pf0, &reference, &stepper).map_err(|f| keep_partial(out, f))?;
    write_trajectory(out, &log, None)?;
    log_metrics(&log, &mut metrics);
    if let (Some(cc), PairConfig::SumPower { m }) = (&c.certificate, &c.pair) {
        let mut cc = cc.clone();
        if cc.column == "N_psi" {
            cc.column = "N_sys".into();
        }
        let cert = sum_power_certificate(&grid, *m, &reference)?;
        certify(out, cert, &log, &cc, c.time.t_end, tol, &mut metrics)?;
    }
    Ok(metrics)
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// One row per site: position, replica mean and standard error of the
/// time-averaged occupation, and the stationary reference.
fn profile_csv(positions: &[[f64; 2]], dim: usize, averages: &[Vec<f64>], reference: Option<&[f64]>) -> String {
    let mut header = vec!["site", "x"];
    if dim == 2 {
        header.push("y");
    }
    header.extend(["mean", "stderr", "reference"]);
    let mut t = CsvTable::new(header);
    for (i, p) in positions.iter().enumerate() {
        let v: Vec<f64> = averages.iter().map(|a| a[i]).collect();
        let (m, s) = mean_stderr(&v);
        let mut row = vec![i.to_string(), fmt_num(p[0])];
        if dim == 2 {
            row.push(fmt_num(p[1]));
        }
        row.extend([fmt_num(m), fmt_num(s), fmt_num(reference.map_or(f64::NAN, |r| r[i]))]);
        t.push(row);
    }
    t.render()
}

fn replica_logs_csv(logs: &[TrajectoryLog]) -> Result<String> {
    if logs.len() == 1 {
        Ok(logs[0].to_csv())
    } else {
        Ok(aggregate_csv(logs)?)
    }
}

pub fn zrp(c: &ZrpConfig, seed: u64, workers: usize, out: &mut Output) -> Result<Metrics> {
    let model = c.model();
    let positions = model.positions();
    let mut opts = ZrpOptions::new(c.t_end, c.obs_dt).burn_in(c.burn_in);
    opts.max_events = c.max_events;
    opts.block = c.block;
    let runs: Vec<ZrpRun> = run_replicas(c.replicas, seed, workers, |_, s| {
        let eta0 = match (&model.species, &c.two_species, &c.initial) {
            (Species::Two(rates), Some(t), _) => {
                let sites = sample_pair_product_measure(rates, t.lambda, t.gamma, model.site_count(), derive_seed(s, 1))?;
                Configuration::pair(sites.iter().map(|p| p.0).collect(), sites.iter().map(|p| p.1).collect())
            }
            (Species::One(rate), _, Some(init)) => {
                let profile: Vec<f64> = positions.iter().map(|&x| init.eval(x, model.dim, 1.0)).collect();
                Configuration::single(sample_product_measure(rate, &profile, derive_seed(s, 1))?)
            }
            _ => unreachable!("validated configuration"),
        };
        simulate_zrp(&model, &eta0, &opts, derive_seed(s, 2))
    })?;
    let logs: Vec<TrajectoryLog> = runs.iter().map(|r| r.log.clone()).collect();
    out.write("trajectory.csv", &replica_logs_csv(&logs)?)?;
    let averages: Vec<Vec<f64>> = runs.iter().map(|r| r.time_average.clone()).collect();
    out.write("profile.csv", &profile_csv(&positions, model.dim, &averages, runs[0].reference.as_deref()))?;
    let width = c.block.unwrap_or_else(|| relent_micro::zrp::default_block_width(model.n));
    let geometry = blocks(&model, width);
    let mut table = CsvTable::new(["block", "x", "mean", "stderr", "reference"]);
    for (k, b) in geometry.iter().enumerate() {
        let per: Vec<f64> = averages.iter().map(|a| b.sites.iter().map(|&s| a[s]).sum::<f64>() / b.sites.len() as f64).collect();
        let (m, s) = mean_stderr(&per);
        let r = runs[0]
            .reference
            .as_ref()
            .map_or(f64::NAN, |r| b.sites.iter().map(|&s| r[s]).sum::<f64>() / b.sites.len() as f64);
        table.push(vec![k.to_string(), fmt_num(b.center[0]), fmt_num(m), fmt_num(s), fmt_num(r)]);
    }
    out.write("blocks.csv", &table.render())?;
    let mut metrics = Metrics::new();
    metrics.insert("events".into(), runs.iter().map(|r| r.events as f64).sum());
    let last: Vec<f64> = runs.iter().map(|r| r.log.rows.last().map_or(f64::NAN, |row| row[0])).collect();
    metrics.insert("final_S_N_mean".into(), mean_stderr(&last).0);
    if let Some(l) = &c.lyapunov {
        let stat = lyapunov_monitor(&logs, &l.column, l.window.unwrap_or((0.0, c.t_end)), l.band)?;
        metrics.insert("lyapunov_increases".into(), stat.increases as f64);
        metrics.insert("lyapunov_slope".into(), stat.slope);
        out.json("lyapunov.json", &stat)?;
    }
    Ok(metrics)
}

pub fn gl(c: &GlConfig, seed: u64, workers: usize, out: &mut Output) -> Result<Metrics> {
    let model = c.model();
    let xi0 = c.initial_spins()?;
    let mut opts = GlOptions::new(c.t_end, c.obs_dt).burn_in(c.burn_in);
    opts.block = c.block;
    let runs: Vec<GlRun> = run_replicas(c.replicas, seed, workers, |_, s| simulate_gl(&model, &xi0, &opts, s))?;
    let logs: Vec<TrajectoryLog> = runs.iter().map(|r| r.log.clone()).collect();
    out.write("trajectory.csv", &replica_logs_csv(&logs)?)?;
    let positions: Vec<[f64; 2]> = (1..=c.n).map(|i| [i as f64 / (c.n + 1) as f64, 0.0]).collect();
    let averages: Vec<Vec<f64>> = runs.iter().map(|r| r.time_mean.clone()).collect();
    out.write("profile.csv", &profile_csv(&positions, 1, &averages, Some(&runs[0].reference)))?;
    let drift = runs
        .iter()
        .map(|r| {
            let mass = r.log.column("mass").unwrap_or_default();
            mass.iter().map(|m| (m - mass[0]).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let g_last: Vec<f64> = runs.iter().map(|r| r.log.rows.last().map_or(f64::NAN, |row| row[1])).collect();
    let mut metrics = Metrics::from([
        ("final_G_mean".to_string(), mean_stderr(&g_last).0),
        ("steps".to_string(), runs[0].steps as f64),
    ]);
    if model.chemical_potentials().is_none() {
        metrics.insert("max_mass_drift".into(), drift);
    }
    Ok(metrics)
}
