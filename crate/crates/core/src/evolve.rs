//! Time integration of `df/dt = L(sigma(f) nu) / nu` with clamped states.
//!
//! The state is carried as the deviation `delta = f - f_ref` from the
//! stationary reference, and `sigma(f) - sigma(f_ref)` is formed without
//! cancellation. This keeps full relative precision when the solution is
//! already very close to equilibrium, which matters for long decay runs.

use serde::Serialize;
use thiserror::Error;

use crate::csv::{fmt_num, CsvTable};
use crate::entropy::{
    h_phi_deviation, n_psi_deviation, production_h_jump_deviation, production_n_jump_deviation, REFERENCE_FLOOR,
};
use crate::error::{Error, Result};
use crate::generator::DiscreteGenerator;
use crate::model::{ConvexGenerator, DensityField, GeneratorKind, Nonlinearity, Point};
use crate::stationary::{solve_stationary, StationaryOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    ExplicitEuler,
    ImplicitEuler,
}

#[derive(Debug, Clone, Copy)]
pub struct TimeStepper {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    /// Log diagnostics every `snapshot_stride` steps (and at the end).
    pub snapshot_stride: usize,
    /// Keep the density field at logged times.
    pub store_densities: bool,
    /// Newton residual tolerance relative to the step size in `f`.
    pub newton_tol: f64,
    pub newton_max_iters: usize,
}

impl TimeStepper {
    pub fn implicit(dt: f64, t_end: f64) -> Self {
        Self {
            scheme: Scheme::ImplicitEuler,
            dt,
            t_end,
            snapshot_stride: 1,
            store_densities: false,
            newton_tol: 1e-11,
            newton_max_iters: 50,
        }
    }

    pub fn explicit(dt: f64, t_end: f64) -> Self {
        Self { scheme: Scheme::ExplicitEuler, ..Self::implicit(dt, t_end) }
    }

    pub fn stride(mut self, k: usize) -> Self {
        self.snapshot_stride = k;
        self
    }

    pub fn with_densities(mut self) -> Self {
        self.store_densities = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!("t_end = {} must be nonnegative", self.t_end)));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::InvalidArgument("snapshot stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Functional logged along a trajectory.
#[derive(Debug, Clone)]
pub struct EntropySpec {
    pub generator: ConvexGenerator,
}

impl EntropySpec {
    pub fn new(generator: ConvexGenerator) -> Self {
        Self { generator }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub t: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunMeta {
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
}

/// Logged diagnostics of a run. `rows[k][j]` is column `j` at `times[k]`.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryLog {
    pub columns: Vec<String>,
    pub times: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub snapshots: Vec<Snapshot>,
    pub final_state: DensityField,
    pub reference: Option<DensityField>,
    pub newton_iterations: usize,
    pub meta: RunMeta,
}

impl TrajectoryLog {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            times: Vec::new(),
            rows: Vec::new(),
            snapshots: Vec::new(),
            final_state: DensityField::new(Vec::new()),
            reference: None,
            newton_iterations: 0,
            meta: RunMeta::default(),
        }
    }

    pub fn push(&mut self, t: f64, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.times.push(t);
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut t = CsvTable::new(std::iter::once("t".to_string()).chain(self.columns.iter().cloned()));
        for (time, row) in self.times.iter().zip(&self.rows) {
            let mut r = vec![fmt_num(*time)];
            r.extend(row.iter().map(|&v| fmt_num(v)));
            t.push(r);
        }
        t.render()
    }

    /// One CSV per stored snapshot, paired with its time.
    pub fn snapshot_csvs(&self, centers: &[Point], dim: usize) -> Vec<(f64, String)> {
        self.snapshots
            .iter()
            .map(|s| (s.t, crate::stationary::stationary_csv(centers, dim, &DensityField::new(s.values.clone()))))
            .map(|(t, csv)| (t, csv.replacen("f_inf", "f", 1)))
            .collect()
    }
}

/// Failed run: the error and everything logged up to the last good state.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct EvolveFailure {
    #[source]
    pub error: Error,
    pub log: TrajectoryLog,
}

impl From<EvolveFailure> for Error {
    fn from(f: EvolveFailure) -> Self {
        f.error
    }
}

/// `df/dt` at free states (zero at clamped states).
pub fn flow_rate(gen: &DiscreteGenerator, nl: &Nonlinearity, f: &DensityField) -> Result<Vec<f64>> {
    f.validate(gen.n())?;
    let u: Vec<f64> = f.values.iter().map(|&s| nl.value(s)).collect();
    let mut r = gen.apply(&u);
    for (x, v) in r.iter_mut().enumerate() {
        if gen.is_clamped(x) {
            *v = 0.0;
        }
    }
    Ok(r)
}

/// Advances `f0` to `stepper.t_end`. The stationary reference is computed
/// from the clamped values of `f0` (or its mass for closed systems).
pub fn evolve(
    gen: &DiscreteGenerator,
    nl: &Nonlinearity,
    f0: &DensityField,
    stepper: &TimeStepper,
    diagnostics: &[EntropySpec],
) -> std::result::Result<TrajectoryLog, EvolveFailure> {
    let fail = |e: Error| EvolveFailure { error: e, log: TrajectoryLog::new(Vec::new()) };
    f0.validate(gen.n()).map_err(fail)?;
    let opts = StationaryOptions { mass: Some(f0.mass(gen.nu())).filter(|m| *m > 0.0), ..Default::default() };
    let solved = if gen.has_clamped() {
        solve_stationary(gen, nl, f0, None, StationaryOptions::default()).map(|s| s.f_inf)
    } else if opts.mass.is_some() {
        solve_stationary(gen, nl, f0, None, opts).map(|s| s.f_inf)
    } else {
        Ok(DensityField::constant(gen.n(), 0.0))
    };
    // Without diagnostics any reference works: a non-stationary one (e.g. for
    // reducible kernels) just carries its residual as a forcing term.
    let reference = match solved {
        Ok(r) => r,
        Err(_) if diagnostics.is_empty() => f0.clone(),
        Err(e) => return Err(fail(e)),
    };
    evolve_with_reference(gen, nl, f0, &reference, stepper, diagnostics)
}

struct Integrator<'a> {
    gen: &'a DiscreteGenerator,
    nl: &'a Nonlinearity,
    fref: Vec<f64>,
    forcing: Vec<f64>,
}

impl Integrator<'_> {
    fn increments(&self, d: &[f64]) -> Vec<f64> {
        d.iter().zip(&self.fref).map(|(&dx, &b)| self.nl.increment(b, dx)).collect()
    }

    fn rate(&self, d: &[f64]) -> Vec<f64> {
        let g = self.increments(d);
        let mut r = self.gen.apply(&g);
        for (x, v) in r.iter_mut().enumerate() {
            if self.gen.is_clamped(x) {
                *v = 0.0;
            } else {
                *v += self.forcing[x];
            }
        }
        r
    }

    /// Net measure flow from clamped into free states for the state `d`.
    fn boundary_exchange(&self, d: &[f64]) -> f64 {
        let nu = self.gen.nu();
        let mut total = 0.0;
        for p in self.gen.pairs() {
            let (ca, cb) = (self.gen.is_clamped(p.a), self.gen.is_clamped(p.b));
            if ca == cb {
                continue;
            }
            let ua = self.nl.value(self.fref[p.a] + d[p.a]);
            let ub = self.nl.value(self.fref[p.b] + d[p.b]);
            let ab = p.k_ab * nu[p.a] * ua - p.k_ba * nu[p.b] * ub;
            total += if ca { ab } else { -ab };
        }
        total
    }

    fn interior_mass(&self, d: &[f64]) -> f64 {
        let nu = self.gen.nu();
        self.gen.free_states().iter().map(|&x| nu[x] * (self.fref[x] + d[x])).sum()
    }

    fn explicit_step(&self, d: &mut [f64], dt: f64, t: f64) -> Result<()> {
        let smax = d
            .iter()
            .zip(&self.fref)
            .map(|(dx, b)| self.nl.slope((b + dx).max(0.0)))
            .fold(0.0, f64::max);
        let limit = 0.9 / (self.gen.max_outflow() * smax);
        if dt > limit {
            return Err(Error::Cfl { dt, limit });
        }
        let r = self.rate(d);
        for &x in self.gen.free_states() {
            d[x] += dt * r[x];
            let f = self.fref[x] + d[x];
            if f < 0.0 {
                return Err(Error::NegativeDensity { cell: x, value: f, time: t + dt });
            }
        }
        Ok(())
    }

    /// Implicit Euler step by Newton's method. Returns the iteration count.
    fn implicit_step(&self, d: &mut [f64], dt: f64, t: f64, tol: f64, max_iters: usize) -> Result<usize> {
        let gen = self.gen;
        let nu = gen.nu();
        let free = gen.free_states();
        let d_old: Vec<f64> = d.to_vec();
        let dold_norm = free.iter().map(|&x| d_old[x].abs()).fold(0.0, f64::max);
        let mut last_res = f64::INFINITY;
        for it in 0..=max_iters {
            let r = self.rate(d);
            let mut res = vec![0.0; free.len()];
            let mut rnorm: f64 = 0.0;
            let mut scale = dold_norm;
            for (k, &x) in free.iter().enumerate() {
                res[k] = d[x] - d_old[x] - dt * r[x];
                rnorm = rnorm.max(res[k].abs());
                scale = scale.max(d[x].abs()).max(dt * r[x].abs());
            }
            if !rnorm.is_finite() {
                return Err(Error::NewtonFailure { time: t + dt, residual: rnorm });
            }
            if rnorm <= tol * scale {
                return Ok(it);
            }
            last_res = rnorm;
            if it == max_iters {
                break;
            }
            let mut jac = gen.free_band();
            let slope: Vec<f64> = (0..gen.n()).map(|x| self.nl.slope((self.fref[x] + d[x]).max(0.0))).collect();
            for (k, &x) in free.iter().enumerate() {
                jac.add(k, k, nu[x] * (1.0 + 1e-12));
            }
            for y in free {
                let fy = gen.free_index(*y).unwrap();
                let w = dt * nu[*y] * slope[*y];
                for (x, kr) in gen.outgoing(*y) {
                    jac.add(fy, fy, kr * w);
                    if let Some(fx) = gen.free_index(x) {
                        jac.add(fx, fy, -kr * w);
                    }
                }
            }
            let lu = jac.factor().map_err(|_| Error::NewtonFailure { time: t + dt, residual: rnorm })?;
            let mut step: Vec<f64> = free.iter().enumerate().map(|(k, &x)| -nu[x] * res[k]).collect();
            lu.solve_in_place(&mut step);
            let mut lambda = 1.0;
            let mut tries = 0;
            loop {
                let ok = free.iter().enumerate().all(|(k, &x)| self.fref[x] + d[x] + lambda * step[k] >= 0.0);
                if ok {
                    break;
                }
                lambda *= 0.5;
                tries += 1;
                if tries > 60 {
                    let (k, &x) = free
                        .iter()
                        .enumerate()
                        .min_by(|a, b| (d[*a.1] + step[a.0]).total_cmp(&(d[*b.1] + step[b.0])))
                        .unwrap();
                    return Err(Error::NegativeDensity { cell: x, value: self.fref[x] + d[x] + step[k], time: t + dt });
                }
            }
            for (k, &x) in free.iter().enumerate() {
                d[x] += lambda * step[k];
            }
        }
        Err(Error::NewtonFailure { time: t + dt, residual: last_res })
    }
}

fn column_names(specs: &[EntropySpec]) -> Vec<String> {
    let mut cols = Vec::new();
    let (mut nh, mut nn) = (0, 0);
    for s in specs {
        let (f, p, count) = match s.generator.kind() {
            GeneratorKind::Phi => ("H_phi", "prod_H", &mut nh),
            GeneratorKind::Psi => ("N_psi", "prod_N", &mut nn),
        };
        *count += 1;
        if *count == 1 {
            cols.push(f.to_string());
            cols.push(p.to_string());
        } else {
            cols.push(format!("{f}_{}", s.generator.name()));
            cols.push(format!("{p}_{}", s.generator.name()));
        }
    }
    cols.push("mass".into());
    cols.push("boundary_exchange".into());
    cols
}

/// Advances `f0` relative to a given stationary `reference`.
pub fn evolve_with_reference(
    gen: &DiscreteGenerator,
    nl: &Nonlinearity,
    f0: &DensityField,
    reference: &DensityField,
    stepper: &TimeStepper,
    diagnostics: &[EntropySpec],
) -> std::result::Result<TrajectoryLog, EvolveFailure> {
    let mut log = TrajectoryLog::new(column_names(diagnostics));
    macro_rules! bail {
        ($e:expr) => {{
            return Err(EvolveFailure { error: $e, log });
        }};
    }
    if let Err(e) = stepper.validate().and(f0.validate(gen.n())).and(reference.validate(gen.n())) {
        bail!(e);
    }
    for x in 0..gen.n() {
        if gen.is_clamped(x) && (f0.values[x] - reference.values[x]).abs() > 1e-14 * reference.values[x].abs().max(1.0) {
            bail!(Error::InvalidDensity(format!(
                "initial value {} at clamped state {x} differs from boundary value {}",
                f0.values[x], reference.values[x]
            )));
        }
    }
    let uref: Vec<f64> = reference.values.iter().map(|&s| nl.value(s)).collect();
    if !diagnostics.is_empty() {
        if let Some((i, &v)) = reference.values.iter().enumerate().find(|(_, v)| !(**v > REFERENCE_FLOOR)) {
            bail!(Error::DegenerateReference { cell: i, value: v });
        }
        if diagnostics.iter().any(|s| s.generator.kind() == GeneratorKind::Psi) {
            let (r, s) = gen.detailed_balance_residual(gen.nu());
            if r > 1e-12 * s {
                bail!(Error::NotReversible { residual: r, tolerance: 1e-12 * s });
            }
        }
    }
    // Residual forcing of the reference; dropped when it is stationary to
    // solver tolerance so that the reference is an exact fixed point.
    let mut forcing = gen.apply(&uref);
    let res = gen.stationarity_residual(&uref);
    let umax = uref.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if res <= 1e-11 * gen.max_rate() * umax {
        forcing.iter_mut().for_each(|v| *v = 0.0);
    } else if !diagnostics.is_empty() {
        bail!(Error::NotStationary { residual: res, tolerance: 1e-11 * gen.max_rate() * umax });
    }
    let integ = Integrator { gen, nl, fref: reference.values.clone(), forcing };
    let mut d: Vec<f64> = f0.values.iter().zip(&reference.values).map(|(a, b)| a - b).collect();
    for x in 0..gen.n() {
        if gen.is_clamped(x) {
            d[x] = 0.0;
        }
    }

    let record = |log: &mut TrajectoryLog, t: f64, d: &[f64]| -> Result<()> {
        let mut row = Vec::with_capacity(log.columns.len());
        for s in diagnostics {
            match s.generator.kind() {
                GeneratorKind::Phi => {
                    row.push(h_phi_deviation(d, &integ.fref, nl, &s.generator, gen.nu())?);
                    row.push(production_h_jump_deviation(d, &integ.fref, &uref, nl, &s.generator, gen));
                }
                GeneratorKind::Psi => {
                    row.push(n_psi_deviation(d, &integ.fref, nl, &s.generator, gen.nu())?);
                    row.push(production_n_jump_deviation(d, &integ.fref, nl, &s.generator, gen));
                }
            }
        }
        row.push(integ.interior_mass(d));
        row.push(integ.boundary_exchange(d));
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logged diagnostic {v} at t = {t}")));
        }
        log.push(t, row);
        if stepper.store_densities {
            let values = d.iter().zip(&integ.fref).map(|(a, b)| a + b).collect();
            log.snapshots.push(Snapshot { t, values });
        }
        Ok(())
    };
    let current = |d: &[f64]| DensityField::new(d.iter().zip(&integ.fref).map(|(a, b)| a + b).collect());

    log.reference = Some(reference.clone());
    if let Err(e) = record(&mut log, 0.0, &d) {
        log.final_state = current(&d);
        bail!(e);
    }
    let steps = ((stepper.t_end / stepper.dt) - 1e-9).ceil().max(0.0) as usize;
    let mut t = 0.0;
    for k in 1..=steps {
        let dt = if k == steps { stepper.t_end - t } else { stepper.dt };
        let good = d.clone();
        let outcome = match stepper.scheme {
            Scheme::ExplicitEuler => integ.explicit_step(&mut d, dt, t).map(|_| 0),
            Scheme::ImplicitEuler => {
                integ.implicit_step(&mut d, dt, t, stepper.newton_tol, stepper.newton_max_iters)
            }
        };
        match outcome {
            Ok(its) => log.newton_iterations += its,
            Err(e) => {
                log.final_state = current(&good);
                bail!(e);
            }
        }
        t = if k == steps { stepper.t_end } else { k as f64 * stepper.dt };
        if k % stepper.snapshot_stride == 0 || k == steps {
            if let Err(e) = record(&mut log, t, &d) {
                log.final_state = current(&d);
                bail!(e);
            }
        }
    }
    log.final_state = current(&d);
    Ok(log)
}
