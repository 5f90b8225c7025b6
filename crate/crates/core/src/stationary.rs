//! Stationary states.
//!
//! The stationary equation `L(sigma(f) nu) = 0` is linear in `u = sigma(f)`,
//! so it is solved directly for `u` and `f` is recovered through the inverse
//! nonlinearity. Closed systems (no clamped states) fix the mass afterwards.

use serde::Serialize;

use crate::csv::{fmt_num, CsvTable};
use crate::error::{Error, Result};
use crate::generator::DiscreteGenerator;
use crate::model::{DensityField, Nonlinearity, Point};

#[derive(Debug, Clone, Copy)]
pub struct StationaryOptions {
    /// Residual tolerance relative to `max rate * max u`.
    pub tolerance_factor: f64,
    /// Total mass `sum nu f` for closed systems. Taken from the initial
    /// guess if absent.
    pub mass: Option<f64>,
    /// Number of iterative refinement sweeps allowed after the direct solve.
    pub max_refinements: usize,
}

impl Default for StationaryOptions {
    fn default() -> Self {
        Self { tolerance_factor: 1e-11, mass: None, max_refinements: 3 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StationaryState {
    pub f_inf: DensityField,
    /// Max-norm of `L(sigma(f_inf) nu)` over free states.
    pub residual_norm: f64,
    pub tolerance: f64,
    /// Linear solves performed; zero when the initial guess was accepted.
    pub iterations: usize,
    /// Min and max of `f_inf` over free states.
    pub bounds: (f64, f64),
}

fn tolerance(gen: &DiscreteGenerator, u: &[f64], factor: f64) -> f64 {
    let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    factor * gen.max_rate() * umax
}

/// Residual of the stationary equation for `f` and its tolerance.
pub fn stationary_residual(gen: &DiscreteGenerator, nl: &Nonlinearity, f: &DensityField, factor: f64) -> Result<(f64, f64)> {
    f.validate(gen.n())?;
    let u: Vec<f64> = f.values.iter().map(|&s| nl.value(s)).collect();
    Ok((gen.stationarity_residual(&u), tolerance(gen, &u, factor)))
}

/// Solves `L(sigma(f) nu) = 0` with `f = boundary` on clamped states.
///
/// Entries of `boundary` at free states are ignored. For closed systems the
/// solution is normalized to `opts.mass`.
pub fn solve_stationary(
    gen: &DiscreteGenerator,
    nl: &Nonlinearity,
    boundary: &DensityField,
    init: Option<&DensityField>,
    opts: StationaryOptions,
) -> Result<StationaryState> {
    let n = gen.n();
    if boundary.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: boundary.len() });
    }
    for x in 0..n {
        if gen.is_clamped(x) && !(boundary.values[x].is_finite() && boundary.values[x] >= 0.0) {
            return Err(Error::InvalidDensity(format!("boundary value {} at state {x}", boundary.values[x])));
        }
    }
    let closed = !gen.has_clamped();
    let mass = if closed {
        let m = match (opts.mass, init) {
            (Some(m), _) => m,
            (None, Some(f0)) => f0.mass(gen.nu()),
            (None, None) => {
                return Err(Error::InvalidArgument("closed system needs a mass or an initial guess".into()))
            }
        };
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::InvalidArgument(format!("mass {m} must be positive")));
        }
        Some(m)
    } else {
        None
    };

    if let Some(f0) = init {
        f0.validate(n)?;
        let consistent_boundary = (0..n).all(|x| {
            !gen.is_clamped(x)
                || (f0.values[x] - boundary.values[x]).abs() <= 1e-14 * boundary.values[x].abs().max(1.0)
        });
        let consistent_mass = mass.map_or(true, |m| (f0.mass(gen.nu()) - m).abs() <= 1e-12 * m);
        if consistent_boundary && consistent_mass {
            let (res, tol) = stationary_residual(gen, nl, f0, opts.tolerance_factor)?;
            if res <= tol {
                return Ok(finish(gen, f0.clone(), res, tol, 0));
            }
        }
    }

    let u_b: Vec<f64> = (0..n)
        .map(|x| if gen.is_clamped(x) { nl.value(boundary.values[x]) } else { 0.0 })
        .collect();
    let (lu, anchor) = factor_stationary(gen, closed)?;
    let free = gen.free_states();
    let mut u = u_b.clone();
    let rhs = stationary_rhs(gen, &u_b, anchor);
    let sol = lu.solve(&rhs);
    for (k, &x) in free.iter().enumerate() {
        u[x] = sol[k];
    }
    let mut iterations = 1;
    let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for k in 0..free.len() {
        let x = free[k];
        if u[x] < 0.0 {
            if u[x] < -1e-10 * umax {
                return Err(Error::InvalidKernel(format!("stationary solution negative ({}) at state {x}", u[x])));
            }
            u[x] = 0.0;
        }
    }
    // Iterative refinement against the measure residual.
    let mut tol = tolerance(gen, &u, opts.tolerance_factor);
    let mut res = gen.stationarity_residual(&u);
    while res > tol && iterations <= opts.max_refinements {
        let w: Vec<f64> = u.iter().zip(gen.nu()).map(|(a, b)| a * b).collect();
        let r = gen.apply_measure(&w);
        let mut corr: Vec<f64> = free.iter().map(|&x| r[x]).collect();
        if let Some(a) = anchor {
            corr[a] = 0.0;
        }
        lu.solve_in_place(&mut corr);
        for (k, &x) in free.iter().enumerate() {
            u[x] = (u[x] - corr[k]).max(0.0);
        }
        iterations += 1;
        tol = tolerance(gen, &u, opts.tolerance_factor);
        res = gen.stationarity_residual(&u);
    }

    let mut f = vec![0.0; n];
    for x in 0..n {
        f[x] = if gen.is_clamped(x) { boundary.values[x] } else { nl.inverse(u[x])? };
    }
    if let Some(m) = mass {
        f = normalize_mass(gen, nl, &u, m)?;
    }
    let f = DensityField::new(f);
    let (res, tol) = stationary_residual(gen, nl, &f, opts.tolerance_factor)?;
    if !(res <= tol) {
        return Err(Error::ResidualTooLarge { residual: res, tolerance: tol });
    }
    Ok(finish(gen, f, res, tol, iterations))
}

fn finish(gen: &DiscreteGenerator, f: DensityField, res: f64, tol: f64, iterations: usize) -> StationaryState {
    let (lo, hi) = gen
        .free_states()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(f.values[x]), b.max(f.values[x])));
    StationaryState { f_inf: f, residual_norm: res, tolerance: tol, iterations, bounds: (lo, hi) }
}

/// Matrix of the free-state equations, negated so the diagonal is positive.
/// Closed systems replace the first equation by `u_0 = 1`.
fn factor_stationary(gen: &DiscreteGenerator, closed: bool) -> Result<(crate::linalg::BandLu, Option<usize>)> {
    let mut m = gen.free_band();
    let nu = gen.nu();
    for y in 0..gen.n() {
        let fy = gen.free_index(y);
        for (x, k) in gen.outgoing(y) {
            let flow = k * nu[y];
            if let Some(fy) = fy {
                m.add(fy, fy, flow);
                if let Some(fx) = gen.free_index(x) {
                    m.add(fx, fy, -flow);
                }
            }
        }
    }
    let anchor = if closed {
        for j in 0..=m.bandwidths().1.min(m.dim() - 1) {
            m.set(0, j, 0.0);
        }
        m.set(0, 0, 1.0);
        Some(0)
    } else {
        None
    };
    Ok((m.factor()?, anchor))
}

fn stationary_rhs(gen: &DiscreteGenerator, u_b: &[f64], anchor: Option<usize>) -> Vec<f64> {
    let mut rhs = vec![0.0; gen.free_states().len()];
    let nu = gen.nu();
    for y in 0..gen.n() {
        if !gen.is_clamped(y) || u_b[y] == 0.0 {
            continue;
        }
        for (x, k) in gen.outgoing(y) {
            if let Some(fx) = gen.free_index(x) {
                rhs[fx] += k * nu[y] * u_b[y];
            }
        }
    }
    if let Some(a) = anchor {
        rhs[a] = 1.0;
    }
    rhs
}

fn normalize_mass(gen: &DiscreteGenerator, nl: &Nonlinearity, u: &[f64], mass: f64) -> Result<Vec<f64>> {
    let nu = gen.nu();
    let base: Vec<f64> = u.iter().map(|&v| nl.inverse(v)).collect::<Result<_>>()?;
    if nl.power_exponent().is_some() {
        // sigma^{-1}(c u) is a multiple of sigma^{-1}(u) for power laws.
        let m0: f64 = base.iter().zip(nu).map(|(a, b)| a * b).sum();
        if !(m0 > 0.0) {
            return Err(Error::InvalidKernel("stationary direction has zero mass".into()));
        }
        return Ok(base.iter().map(|v| v * mass / m0).collect());
    }
    let mass_at = |c: f64| -> Result<f64> {
        let mut s = 0.0;
        for (v, w) in u.iter().zip(nu) {
            s += nl.inverse(c * v)? * w;
        }
        Ok(s)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut guard = 0;
    while mass_at(hi)? < mass {
        lo = hi;
        hi *= 2.0;
        guard += 1;
        if guard > 2000 {
            return Err(Error::InvalidArgument(format!("mass {mass} not attainable")));
        }
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass_at(mid)? < mass {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    u.iter().map(|&v| nl.inverse(c * v)).collect()
}

/// Largest net flux density `|J_ab - J_ba| / area` over all pairs for the
/// state `f`.
pub fn stationary_flux(gen: &DiscreteGenerator, nl: &Nonlinearity, f: &DensityField) -> f64 {
    let nu = gen.nu();
    gen.pairs()
        .iter()
        .map(|p| {
            let ja = p.k_ab * nu[p.a] * nl.value(f.values[p.a]);
            let jb = p.k_ba * nu[p.b] * nl.value(f.values[p.b]);
            (ja - jb).abs() / p.area
        })
        .fold(0.0, f64::max)
}

/// Stationary profile as CSV with one row per cell.
pub fn stationary_csv(centers: &[Point], dim: usize, f: &DensityField) -> String {
    let mut header = vec!["x".to_string()];
    if dim == 2 {
        header.push("y".into());
    }
    header.push("f_inf".into());
    let mut t = CsvTable::new(header);
    for (c, v) in centers.iter().zip(&f.values) {
        let mut row = vec![fmt_num(c[0])];
        if dim == 2 {
            row.push(fmt_num(c[1]));
        }
        row.push(fmt_num(*v));
        t.push(row);
    }
    t.render()
}
