//! Ginzburg-Landau dynamics on a chain of continuous spins, integrated by
//! Euler-Maruyama.
//!
//! Each edge `(i, i+1)` carries the current `(V'(xi_{i+1}) - V'(xi_i)) dt +
//! sqrt(2) dB`, added to site `i` and removed from site `i+1`. Spins are
//! stored in fixed point (`2^-40` resolution) so these transfers cancel
//! exactly and the periodic chain conserves `sum xi` bit for bit. Reservoir
//! sites add `(a - V'(xi_1)) dt + sqrt(2) dB_0` and the same with `b` at the
//! other end, so that `exp(a xi - V)` is invariant for the end spin.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use relent_core::evolve::TrajectoryLog;
use relent_core::quadrature::{integrate, QuadOptions};
use relent_core::{DensityField, Nonlinearity};
use serde::Serialize;

use crate::error::{MicroError, Result};

const SCALE: f64 = (1u64 << 40) as f64;

type Scalar = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Strictly convex single-spin potential.
#[derive(Clone)]
pub enum Potential {
    /// `V = xi^2 / 2`.
    Quadratic,
    /// `V = xi^2 / 2 + c xi^4 / 4`, `c >= 0`.
    Quartic { c: f64 },
    Custom { label: String, v: Scalar, dv: Scalar, d2v: Scalar },
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Quadratic => write!(f, "Quadratic"),
            Self::Quartic { c } => write!(f, "Quartic({c})"),
            Self::Custom { label, .. } => write!(f, "Custom({label})"),
        }
    }
}

impl Potential {
    pub fn v(&self, x: f64) -> f64 {
        match self {
            Self::Quadratic => 0.5 * x * x,
            Self::Quartic { c } => 0.5 * x * x + 0.25 * c * x.powi(4),
            Self::Custom { v, .. } => v(x),
        }
    }

    pub fn dv(&self, x: f64) -> f64 {
        match self {
            Self::Quadratic => x,
            Self::Quartic { c } => x + c * x.powi(3),
            Self::Custom { dv, .. } => dv(x),
        }
    }

    /// `V(x + y) - V(x) - V'(x) y`, without cancellation for the built-in
    /// potentials.
    pub fn remainder(&self, x: f64, y: f64) -> f64 {
        match self {
            Self::Quadratic => 0.5 * y * y,
            Self::Quartic { c } => 0.5 * y * y + 0.25 * c * y * y * (6.0 * x * x + 4.0 * x * y + y * y),
            Self::Custom { v, dv, .. } => v(x + y) - v(x) - dv(x) * y,
        }
    }

    pub fn d2v(&self, x: f64) -> f64 {
        match self {
            Self::Quadratic => 1.0,
            Self::Quartic { c } => 1.0 + 3.0 * c * x * x,
            Self::Custom { d2v, .. } => d2v(x),
        }
    }
}

/// Moments of `exp(-V + lambda xi) / Z`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpinMoments {
    pub lambda: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Mean and variance of the tilted one-spin measure by quadrature.
pub fn spin_moments(pot: &Potential, lambda: f64) -> Result<SpinMoments> {
    if let Potential::Quadratic = pot {
        return Ok(SpinMoments { lambda, mean: lambda, variance: 1.0 });
    }
    // Mode of the tilted density: V'(x) = lambda.
    let mut x = 0.0;
    for _ in 0..200 {
        let step = (pot.dv(x) - lambda) / pot.d2v(x);
        x -= step.clamp(-10.0, 10.0);
        if step.abs() <= 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    let slope = pot.dv(x) - lambda;
    let expo = |y: f64| -(pot.remainder(x, y) + slope * y);
    let w = 1.0 / pot.d2v(x).max(1e-300).sqrt();
    let mut half = [10.0 * w, 10.0 * w];
    for (k, sign) in [-1.0, 1.0].iter().enumerate() {
        while expo(sign * half[k]) > -45.0 {
            half[k] *= 1.5;
            if half[k] > 1e8 {
                return Err(MicroError::InvalidModel("potential does not confine the spin".into()));
            }
        }
    }
    let m = |p: i32, abs_tol: f64| {
        let opts = QuadOptions { abs_tol, rel_tol: 1e-14, max_intervals: 4000 };
        integrate(|y| y.powi(p) * expo(y).exp(), -half[0], half[1], opts)
    };
    let z = m(0, 1e-300)?;
    // The first moment about the mode can vanish; judge it against z w, well
    // above the roundoff floor eps z w of the quadrature sums.
    let (m1, m2) = (m(1, 1e-13 * z * w)?, m(2, 1e-13 * z * w * w)?);
    let shift = m1 / z;
    Ok(SpinMoments { lambda, mean: x + shift, variance: m2 / z - shift * shift })
}

/// Chemical potential `lambda(f)` with mean spin `f`; equals `sigma(f)`.
pub fn gl_fugacity(pot: &Potential, f: f64) -> Result<f64> {
    if !f.is_finite() {
        return Err(MicroError::OutOfRange { density: f, max: f64::INFINITY });
    }
    if let Potential::Quadratic = pot {
        return Ok(f);
    }
    let mut lambda = pot.dv(f);
    for _ in 0..100 {
        let m = spin_moments(pot, lambda)?;
        let r = m.mean - f;
        if r.abs() <= 1e-12 * f.abs().max(1.0) {
            return Ok(lambda);
        }
        lambda -= r / m.variance;
    }
    Err(MicroError::NoConvergence(format!("chemical potential for density {f}")))
}

/// The conductivity `lambda(f)` as a nonlinearity on `[0, f_max]`; needs
/// `lambda(0) = 0`, which holds for even potentials.
pub fn gl_nonlinearity(pot: &Potential, f_max: f64) -> Result<Nonlinearity> {
    if let Potential::Quadratic = pot {
        return Ok(Nonlinearity::identity());
    }
    let (p1, p2) = (pot.clone(), pot.clone());
    Ok(Nonlinearity::from_fn(
        format!("gl {pot:?}"),
        Arc::new(move |f| gl_fugacity(&p1, f).unwrap_or(f64::NAN)),
        Some(Arc::new(move |f| {
            let l = gl_fugacity(&p2, f).unwrap_or(f64::NAN);
            spin_moments(&p2, l).map_or(f64::NAN, |m| 1.0 / m.variance)
        })),
        f_max,
    )?)
}

/// Large-deviation functional
/// `sum_i w_i int_{f_inf_i}^{f_i} (lambda(s) - lambda(f_inf_i)) ds`.
pub fn gl_functional(pot: &Potential, f: &[f64], f_inf: &[f64], weights: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for ((&a, &b), &w) in f.iter().zip(f_inf).zip(weights) {
        if a == b {
            continue;
        }
        let v = if let Potential::Quadratic = pot {
            0.5 * (a - b) * (a - b)
        } else {
            let lb = gl_fugacity(pot, b)?;
            let opts = QuadOptions { abs_tol: 1e-15, rel_tol: 1e-13, max_intervals: 2000 };
            integrate(|s| gl_fugacity(pot, s).map_or(f64::NAN, |l| l - lb), b, a, opts)?
        };
        total += w * v;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum GlBoundary {
    Periodic,
    /// Chemical potentials `a` at site 1 and `b` at site N.
    Reservoirs { a: f64, b: f64 },
}

#[derive(Debug, Clone)]
pub struct GlModel {
    pub n: usize,
    pub potential: Potential,
    pub boundary: GlBoundary,
    /// Euler-Maruyama step.
    pub dt: f64,
}

impl GlModel {
    /// Chemical potentials `lambda_i = a + (b - a) i / (N + 1)` of the
    /// invariant product measure (reservoirs only).
    pub fn chemical_potentials(&self) -> Option<Vec<f64>> {
        match self.boundary {
            GlBoundary::Periodic => None,
            GlBoundary::Reservoirs { a, b } => {
                Some((1..=self.n).map(|i| a + (b - a) * i as f64 / (self.n + 1) as f64).collect())
            }
        }
    }

    /// Stationary mean spin profile; periodic chains use the mean of `xi0`.
    pub fn stationary_profile(&self, xi0: &[f64]) -> Result<Vec<f64>> {
        match self.chemical_potentials() {
            None => Ok(vec![xi0.iter().sum::<f64>() / self.n as f64; self.n]),
            Some(l) => l.iter().map(|&l| spin_moments(&self.potential, l).map(|m| m.mean)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GlOptions {
    pub t_end: f64,
    pub obs_dt: f64,
    pub burn_in: f64,
    /// Blow-up threshold on `|xi|`.
    pub cap: f64,
    /// Block width for the functional; `sqrt(N)` if absent.
    pub block: Option<usize>,
}

impl GlOptions {
    pub fn new(t_end: f64, obs_dt: f64) -> Self {
        Self { t_end, obs_dt, burn_in: 0.0, cap: 1e6, block: None }
    }

    pub fn burn_in(mut self, t: f64) -> Self {
        self.burn_in = t;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GlRun {
    /// Columns `mass` (`sum xi`) and `G` (functional of the block profile).
    pub log: TrajectoryLog,
    /// Per-site time averages of `xi` and `xi^2` after `burn_in`.
    pub time_mean: Vec<f64>,
    pub time_second_moment: Vec<f64>,
    pub samples: usize,
    pub final_state: Vec<f64>,
    pub steps: usize,
    pub reference: Vec<f64>,
}

/// Runs the dynamics from `xi0` to `opts.t_end`.
pub fn simulate_gl(model: &GlModel, xi0: &[f64], opts: &GlOptions, seed: u64) -> Result<GlRun> {
    let n = model.n;
    if xi0.len() != n || n < 2 {
        return Err(MicroError::InvalidModel(format!("chain of {} spins with {} initial values", n, xi0.len())));
    }
    if !(model.dt > 0.0 && opts.obs_dt >= model.dt && opts.t_end >= 0.0) {
        return Err(MicroError::InvalidModel("need dt > 0 and obs_dt >= dt".into()));
    }
    let pot = &model.potential;
    let lo = xi0.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xi0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let curv = (0..=32).map(|k| pot.d2v(lo + (hi - lo) * k as f64 / 32.0)).fold(0.0, f64::max);
    if !(curv > 0.0) || model.dt > 0.1 / curv {
        return Err(MicroError::InvalidModel(format!("dt = {} exceeds 0.1 / max V'' = {}", model.dt, 0.1 / curv)));
    }
    if xi0.iter().any(|v| !(v.abs() < opts.cap)) {
        return Err(MicroError::InvalidModel("initial spins exceed the blow-up cap".into()));
    }
    let reference = model.stationary_profile(xi0)?;
    let width = opts.block.unwrap_or(((n as f64).sqrt().round() as usize).max(1));
    let nb = (n / width).max(1);
    let cuts: Vec<(usize, usize)> = (0..nb).map(|b| (b * width, if b + 1 == nb { n } else { (b + 1) * width })).collect();
    let weights: Vec<f64> = cuts.iter().map(|(a, b)| (b - a) as f64 / n as f64).collect();
    let avg = |v: &[f64]| -> Vec<f64> { cuts.iter().map(|&(a, b)| v[a..b].iter().sum::<f64>() / (b - a) as f64).collect() };
    let ref_blocks = avg(&reference);

    let mut q: Vec<i64> = xi0.iter().map(|v| (v * SCALE).round() as i64).collect();
    let xi = |q: &[i64]| -> Vec<f64> { q.iter().map(|&v| v as f64 / SCALE).collect() };
    let mut log = TrajectoryLog::new(vec!["mass".into(), "G".into()]);
    let record = |t: f64, q: &[i64], log: &mut TrajectoryLog| -> Result<()> {
        let mass = q.iter().map(|&v| v as i128).sum::<i128>() as f64 / SCALE;
        let g = gl_functional(pot, &avg(&xi(q)), &ref_blocks, &weights)?;
        log.push(t, vec![mass, g]);
        Ok(())
    };
    let steps = (opts.t_end / model.dt).round() as usize;
    let stride = ((opts.obs_dt / model.dt).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = (2.0 * model.dt).sqrt();
    let mut mean = vec![0.0; n];
    let mut second = vec![0.0; n];
    let mut samples = 0usize;
    let edges = match model.boundary {
        GlBoundary::Periodic => n,
        GlBoundary::Reservoirs { .. } => n - 1,
    };
    let quant = |x: f64| (x * SCALE).round() as i64;
    record(0.0, &q, &mut log)?;
    for step in 1..=steps {
        let t = step as f64 * model.dt;
        let x = xi(&q);
        let dv: Vec<f64> = x.iter().map(|&v| pot.dv(v)).collect();
        for i in 0..edges {
            let j = (i + 1) % n;
            let db: f64 = StandardNormal.sample(&mut rng);
            let flow = quant((dv[j] - dv[i]) * model.dt + sq * db);
            q[i] += flow;
            q[j] -= flow;
        }
        if let GlBoundary::Reservoirs { a, b } = model.boundary {
            let d0: f64 = StandardNormal.sample(&mut rng);
            let d1: f64 = StandardNormal.sample(&mut rng);
            q[0] += quant((a - dv[0]) * model.dt + sq * d0);
            q[n - 1] += quant((b - dv[n - 1]) * model.dt + sq * d1);
        }
        for (i, &v) in q.iter().enumerate() {
            let s = v as f64 / SCALE;
            if !(s.abs() < opts.cap) {
                return Err(MicroError::BlowUp { site: i, value: s, time: t });
            }
        }
        if t > opts.burn_in {
            for (i, &v) in q.iter().enumerate() {
                let s = v as f64 / SCALE;
                mean[i] += s;
                second[i] += s * s;
            }
            samples += 1;
        }
        if step % stride == 0 || step == steps {
            record(t, &q, &mut log)?;
        }
    }
    if samples > 0 {
        for i in 0..n {
            mean[i] /= samples as f64;
            second[i] /= samples as f64;
        }
    }
    let final_state = xi(&q);
    log.final_state = DensityField::new(final_state.clone());
    log.reference = Some(DensityField::new(reference.clone()));
    Ok(GlRun { log, time_mean: mean, time_second_moment: second, samples, final_state, steps, reference })
}
