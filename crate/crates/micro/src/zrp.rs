//! Zero range process on `{1..N}^d` by rejection-free kinetic Monte Carlo.
//!
//! A site with `n` particles sends one to the neighbor in direction
//! `+-e_l` at rate `N^2 g(n) exp(+-h E_l(x) / 2)`, `h` the lattice spacing.
//! Reservoir mode replaces the two x-faces by ghost sites at fixed
//! fugacity `lambda(f_b)`: particles stepping onto them are removed and
//! each ghost injects at rate `N^2 lambda(f_b) exp(+-h E_x / 2)`. In two
//! dimensions the y-direction is periodic in reservoir mode; this geometry
//! is experimental.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use relent_core::entropy::ld_rate_f;
use relent_core::evolve::{Snapshot, TrajectoryLog};
use relent_core::generator::DiscreteGenerator;
use relent_core::model::Point;
use relent_core::{solve_stationary, DensityField, FieldSpec, Nonlinearity, StationaryOptions};
use serde::Serialize;

use crate::error::{MicroError, Result};
use crate::site::{conductivity_nonlinearity, fugacity_from_density, PairRates, RateFn, SiteMeasure};
use crate::tree::SumTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ZrpBoundary {
    /// Periodic lattice.
    Ring,
    /// Reflecting walls: jumps out of the lattice are suppressed.
    Closed,
    /// Reservoirs at densities `left` (x = 0) and `right` (x = 1).
    Reservoirs { left: f64, right: f64 },
}

#[derive(Debug, Clone)]
pub enum Species {
    One(RateFn),
    Two(PairRates),
}

#[derive(Debug, Clone)]
pub struct ZrpModel {
    /// Sites per axis.
    pub n: usize,
    pub dim: usize,
    pub species: Species,
    pub boundary: ZrpBoundary,
    pub field: FieldSpec,
}

#[derive(Debug, Clone, Copy)]
enum Target {
    Site(usize),
    /// Removal into a reservoir.
    Exit,
}

impl ZrpModel {
    pub fn new(n: usize, dim: usize, species: Species, boundary: ZrpBoundary) -> Self {
        Self { n, dim, species, boundary, field: FieldSpec::Zero }
    }

    pub fn with_field(mut self, field: FieldSpec) -> Self {
        self.field = field;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dim == 1 || self.dim == 2) {
            return Err(MicroError::InvalidModel(format!("dimension {} (1 or 2 supported)", self.dim)));
        }
        if self.n < 2 {
            return Err(MicroError::InvalidModel("at least 2 sites per axis required".into()));
        }
        match &self.species {
            Species::One(r) => r.validate()?,
            Species::Two(_) => {
                if matches!(self.boundary, ZrpBoundary::Reservoirs { .. }) {
                    return Err(MicroError::InvalidModel("two-species reservoirs are not supported".into()));
                }
            }
        }
        if let ZrpBoundary::Reservoirs { left, right } = self.boundary {
            if !(left >= 0.0 && right >= 0.0 && left.is_finite() && right.is_finite()) {
                return Err(MicroError::InvalidModel(format!("reservoir densities ({left}, {right})")));
            }
        }
        Ok(())
    }

    pub fn site_count(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Lattice spacing: `1/(N+1)` between reservoirs, `1/N` otherwise.
    pub fn spacing(&self) -> f64 {
        match self.boundary {
            ZrpBoundary::Reservoirs { .. } => 1.0 / (self.n + 1) as f64,
            _ => 1.0 / self.n as f64,
        }
    }

    /// Jump-rate prefactor, `1 / h^2`.
    pub fn time_scale(&self) -> f64 {
        let h = self.spacing();
        1.0 / (h * h)
    }

    fn coord(&self, axis: usize, k: usize) -> f64 {
        match (self.boundary, axis) {
            (ZrpBoundary::Reservoirs { .. }, 0) => (k + 1) as f64 * self.spacing(),
            _ => (k as f64 + 0.5) / self.n as f64,
        }
    }

    /// Macroscopic position of site `i` (index `ix + N iy`).
    pub fn position(&self, i: usize) -> Point {
        let ix = i % self.n;
        let iy = i / self.n;
        [self.coord(0, ix), if self.dim == 2 { self.coord(1, iy) } else { 0.0 }]
    }

    pub fn positions(&self) -> Vec<Point> {
        (0..self.site_count()).map(|i| self.position(i)).collect()
    }

    fn weight(&self, x: Point, axis: usize, sign: f64) -> f64 {
        (sign * 0.5 * self.spacing() * self.field.at(x)[axis]).exp()
    }

    /// Outgoing targets per site, and ghost sources `(site, weight, density)`.
    fn lattice(&self) -> (Vec<Vec<(Target, f64)>>, Vec<(usize, f64, f64)>) {
        let n = self.n;
        let mut targets = vec![Vec::new(); self.site_count()];
        let mut ghosts = Vec::new();
        for (i, out) in targets.iter_mut().enumerate() {
            let x = self.position(i);
            let idx = [i % n, i / n];
            for axis in 0..self.dim {
                for sign in [1.0, -1.0] {
                    let w = self.weight(x, axis, sign);
                    let k = idx[axis] as i64 + sign as i64;
                    let inside = k >= 0 && k < n as i64;
                    let wrap = |k: i64| k.rem_euclid(n as i64) as usize;
                    let mut j = idx;
                    let target = match (self.boundary, axis, inside) {
                        (_, _, true) => {
                            j[axis] = k as usize;
                            Some(Target::Site(j[0] + n * j[1]))
                        }
                        (ZrpBoundary::Ring, _, false) | (ZrpBoundary::Reservoirs { .. }, 1, false) => {
                            j[axis] = wrap(k);
                            Some(Target::Site(j[0] + n * j[1]))
                        }
                        (ZrpBoundary::Closed, _, false) => None,
                        (ZrpBoundary::Reservoirs { .. }, _, false) => Some(Target::Exit),
                    };
                    if let Some(t) = target {
                        out.push((t, w));
                    }
                }
            }
        }
        if let ZrpBoundary::Reservoirs { left, right } = self.boundary {
            let rows = if self.dim == 2 { n } else { 1 };
            for iy in 0..rows {
                let y = if self.dim == 2 { self.coord(1, iy) } else { 0.0 };
                ghosts.push((n * iy, self.weight([0.0, y], 0, 1.0), left));
                ghosts.push((n * iy + n - 1, self.weight([1.0, y], 0, -1.0), right));
            }
        }
        (targets, ghosts)
    }
}

/// Occupation numbers of species A and, for two-species models, B.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Configuration {
    pub a: Vec<u64>,
    pub b: Option<Vec<u64>>,
}

impl Configuration {
    pub fn single(a: Vec<u64>) -> Self {
        Self { a, b: None }
    }

    pub fn pair(a: Vec<u64>, b: Vec<u64>) -> Self {
        Self { a, b: Some(b) }
    }

    pub fn particles(&self) -> u64 {
        self.a.iter().sum::<u64>() + self.b.as_ref().map_or(0, |b| b.iter().sum())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZrpOptions {
    pub t_end: f64,
    /// Observation spacing; observations are taken at `k * obs_dt`.
    pub obs_dt: f64,
    /// Start of the time-averaging window.
    pub burn_in: f64,
    pub max_events: u64,
    /// Block width for smoothed profiles; `sqrt(N)` if absent.
    pub block: Option<usize>,
    /// Keep smoothed profiles at every observation.
    pub record_profiles: bool,
}

impl ZrpOptions {
    pub fn new(t_end: f64, obs_dt: f64) -> Self {
        Self { t_end, obs_dt, burn_in: 0.0, max_events: 10_000_000_000, block: None, record_profiles: false }
    }

    pub fn burn_in(mut self, t: f64) -> Self {
        self.burn_in = t;
        self
    }

    pub fn profiles(mut self) -> Self {
        self.record_profiles = true;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ZrpRun {
    /// Columns `S_N`, `particles` and, when a stationary reference exists,
    /// `F` (the rate functional of the block profile); two-species runs add
    /// `S_N_B`. Snapshots hold block densities of species A.
    pub log: TrajectoryLog,
    /// Site occupations of species A averaged over `[burn_in, t_end]`.
    pub time_average: Vec<f64>,
    pub final_state: Configuration,
    pub events: u64,
    /// Stationary density profile of species A, if computed.
    pub reference: Option<Vec<f64>>,
    /// Block geometry of the smoothed profiles.
    pub blocks: Vec<Block>,
}

/// A block of sites and its weight `|B| / N^d`.
#[derive(Debug, Clone, Serialize)]
pub struct Block {
    pub sites: Vec<usize>,
    pub center: Point,
    pub weight: f64,
}

/// Tiles the lattice by `width`-site blocks (the last one per axis absorbs
/// the remainder).
pub fn blocks(model: &ZrpModel, width: usize) -> Vec<Block> {
    let n = model.n;
    let w = width.clamp(1, n);
    let cuts: Vec<(usize, usize)> = {
        let m = (n / w).max(1);
        (0..m).map(|b| (b * w, if b + 1 == m { n } else { (b + 1) * w })).collect()
    };
    let total = model.site_count() as f64;
    let rows: Vec<(usize, usize)> = if model.dim == 2 { cuts.clone() } else { vec![(0, 1)] };
    let mut out = Vec::new();
    for &(y0, y1) in &rows {
        for &(x0, x1) in &cuts {
            let mut sites = Vec::new();
            for iy in y0..y1 {
                for ix in x0..x1 {
                    sites.push(ix + n * iy);
                }
            }
            let mut c = [0.0; 2];
            for &s in &sites {
                let p = model.position(s);
                c[0] += p[0] / sites.len() as f64;
                c[1] += p[1] / sites.len() as f64;
            }
            out.push(Block { weight: sites.len() as f64 / total, center: c, sites });
        }
    }
    out
}

pub fn default_block_width(n: usize) -> usize {
    ((n as f64).sqrt().round() as usize).max(1)
}

/// Per-site block averages.
pub fn block_profile(values: &[f64], blocks: &[Block]) -> Vec<f64> {
    blocks.iter().map(|b| b.sites.iter().map(|&s| values[s]).sum::<f64>() / b.sites.len() as f64).collect()
}

/// Rate functional `sum_B |B|/N^d F(rho_B | f_inf_B)` of a block profile.
pub fn block_functional(rho: &[f64], reference: &[f64], blocks: &[Block], nl: &Nonlinearity) -> Result<f64> {
    let mut total = 0.0;
    for (b, r) in blocks.iter().zip(rho) {
        let fi = b.sites.iter().map(|&s| reference[s]).sum::<f64>() / b.sites.len() as f64;
        total += b.weight * ld_rate_f(*r, fi, nl)?;
    }
    Ok(total)
}

/// Stationary fugacities of a 1D chain from the linear balance equations,
/// normalized to mean 1 for closed and periodic chains.
fn chain_fugacity(n: usize, weights: &dyn Fn(f64) -> f64, mode: ZrpBoundary, ghost: [f64; 2]) -> Result<Vec<f64>> {
    let reservoir = matches!(mode, ZrpBoundary::Reservoirs { .. });
    let states = if reservoir { n + 2 } else { n };
    // Site k maps to state k (+1 with a left ghost at state 0).
    let off = usize::from(reservoir);
    let mut rates = Vec::new();
    for k in 0..n {
        for sign in [1.0, -1.0] {
            let j = k as i64 + sign as i64;
            let w = weights(sign);
            let to = if j >= 0 && j < n as i64 {
                Some(j as usize + off)
            } else {
                match mode {
                    ZrpBoundary::Ring => Some(j.rem_euclid(n as i64) as usize),
                    ZrpBoundary::Closed => None,
                    ZrpBoundary::Reservoirs { .. } => Some(if j < 0 { 0 } else { n + 1 }),
                }
            };
            if let Some(t) = to {
                if t != k + off {
                    rates.push((k + off, t, w));
                }
            }
        }
    }
    let mut clamped = vec![false; states];
    let mut boundary = vec![0.0; states];
    if reservoir {
        rates.push((0, 1, weights(1.0)));
        rates.push((n + 1, n, weights(-1.0)));
        clamped[0] = true;
        clamped[n + 1] = true;
        boundary[0] = ghost[0];
        boundary[n + 1] = ghost[1];
    }
    let gen = DiscreteGenerator::from_rates(vec![1.0; states], &rates, clamped)?;
    let opts = StationaryOptions { mass: (!reservoir).then_some(n as f64), ..Default::default() };
    let st = solve_stationary(&gen, &Nonlinearity::identity(), &DensityField::new(boundary), None, opts)?;
    Ok(st.f_inf.values[off..off + n].to_vec())
}

fn density_of(rate: &RateFn, lambda: f64) -> Result<f64> {
    match rate {
        RateFn::Linear => Ok(lambda),
        RateFn::Constant(c) => {
            let r = lambda / c;
            if r >= 1.0 {
                return Err(MicroError::OutOfRange { density: f64::INFINITY, max: f64::INFINITY });
            }
            Ok(r / (1.0 - r))
        }
        _ => Ok(SiteMeasure::new(rate, lambda)?.mean),
    }
}

/// Stationary density profile of a one-species model with a constant (or
/// zero) field; `particles` fixes the level for ring and closed lattices.
pub fn stationary_profile(model: &ZrpModel, particles: u64) -> Result<Option<Vec<f64>>> {
    let rate = match &model.species {
        Species::One(r) => r,
        Species::Two(_) => return Ok(None),
    };
    let e = match &model.field {
        FieldSpec::Zero => [0.0, 0.0],
        FieldSpec::Constant(e) => *e,
        FieldSpec::Function(_) => return Ok(None),
    };
    let h = model.spacing();
    let n = model.n;
    let (ghost, ymode) = match model.boundary {
        ZrpBoundary::Reservoirs { left, right } => {
            ([fugacity_from_density(rate, left)?, fugacity_from_density(rate, right)?], ZrpBoundary::Ring)
        }
        b => ([0.0; 2], b),
    };
    let wx = move |s: f64| (s * 0.5 * h * e[0]).exp();
    let ux = if matches!(model.boundary, ZrpBoundary::Ring) || (e[0] == 0.0 && model.boundary == ZrpBoundary::Closed) {
        vec![1.0; n]
    } else {
        chain_fugacity(n, &wx, model.boundary, ghost)?
    };
    let uy = if model.dim == 1 || ymode == ZrpBoundary::Ring || e[1] == 0.0 {
        vec![1.0; if model.dim == 2 { n } else { 1 }]
    } else {
        let wy = move |s: f64| (s * 0.5 * h * e[1]).exp();
        chain_fugacity(n, &wy, ymode, [0.0; 2])?
    };
    let shape: Vec<f64> = (0..model.site_count()).map(|i| ux[i % n] * uy[(i / n).min(uy.len() - 1)]).collect();
    let lambdas = if matches!(model.boundary, ZrpBoundary::Reservoirs { .. }) {
        shape
    } else {
        // Scale the fugacity shape so the expected particle number matches.
        let target = particles as f64;
        let total = |c: f64| -> Result<f64> { shape.iter().map(|&u| density_of(rate, c * u)).sum() };
        let umax = shape.iter().cloned().fold(0.0, f64::max);
        let mut lo = 0.0;
        let mut hi = if rate.sup().is_finite() { rate.sup() / umax } else { 1.0 };
        if rate.sup().is_infinite() {
            while total(hi)? < target {
                hi *= 2.0;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let v = total(mid).unwrap_or(f64::INFINITY);
            if v < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        let c = 0.5 * (lo + hi);
        shape.iter().map(|u| c * u).collect()
    };
    Ok(Some(lambdas.iter().map(|&l| density_of(rate, l)).collect::<Result<Vec<f64>>>()?))
}

fn site_rate(species: &Species, a: u64, b: u64) -> (f64, f64) {
    match species {
        Species::One(r) => (r.eval(a), 0.0),
        Species::Two(p) => {
            let ua = if a > 0 { (p.u)(a, b) } else { 0.0 };
            let vb = if b > 0 { (p.v)(a, b) } else { 0.0 };
            (ua, vb)
        }
    }
}

/// Runs the process from `eta0` up to `opts.t_end`.
pub fn simulate_zrp(model: &ZrpModel, eta0: &Configuration, opts: &ZrpOptions, seed: u64) -> Result<ZrpRun> {
    model.validate()?;
    let ns = model.site_count();
    if eta0.a.len() != ns || eta0.b.as_ref().is_some_and(|b| b.len() != ns) {
        return Err(MicroError::InvalidModel(format!("configuration length differs from {ns} sites")));
    }
    if !(opts.t_end >= 0.0 && opts.obs_dt > 0.0) {
        return Err(MicroError::InvalidModel("t_end must be nonnegative and obs_dt positive".into()));
    }
    let two = matches!(model.species, Species::Two(_));
    if two != eta0.b.is_some() {
        return Err(MicroError::InvalidModel("configuration species count does not match the model".into()));
    }
    if let Species::Two(p) = &model.species {
        let top = eta0.a.iter().chain(eta0.b.as_ref().unwrap()).copied().max().unwrap_or(0);
        p.check_condition((2 * top).clamp(8, 64))?;
    }
    let (targets, ghosts) = model.lattice();
    let wsum: Vec<f64> = targets.iter().map(|t| t.iter().map(|(_, w)| w).sum()).collect();
    let scale = model.time_scale();
    let ghost_rates: Vec<f64> = match &model.species {
        Species::One(r) => ghosts
            .iter()
            .map(|&(_, w, f)| fugacity_from_density(r, f).map(|l| scale * l * w))
            .collect::<Result<_>>()?,
        Species::Two(_) => Vec::new(),
    };

    let reference = stationary_profile(model, eta0.a.iter().sum())?;
    let width = opts.block.unwrap_or_else(|| default_block_width(model.n));
    let blks = blocks(model, width);
    let nl = match (&model.species, &reference) {
        (Species::One(r), Some(f)) if f.iter().all(|&v| v > 0.0) => {
            let fmax = f.iter().cloned().fold(0.0, f64::max);
            let top = eta0.a.iter().copied().max().unwrap_or(0) as f64;
            Some(conductivity_nonlinearity(r, 4.0 * fmax.max(top).max(1.0))?)
        }
        _ => None,
    };
    let mut columns = vec!["S_N".to_string(), "particles".to_string()];
    if two {
        columns.push("S_N_B".into());
    }
    if nl.is_some() {
        columns.push("F".into());
    }
    let mut log = TrajectoryLog::new(columns);

    let mut a = eta0.a.clone();
    let mut b = eta0.b.clone().unwrap_or_default();
    let mut tree = SumTree::new(ns + ghost_rates.len());
    let mut rates = vec![(0.0, 0.0); ns];
    let update = |i: usize, a: &[u64], b: &[u64], tree: &mut SumTree, rates: &mut [(f64, f64)]| {
        let r = site_rate(&model.species, a[i], if two { b[i] } else { 0 });
        rates[i] = r;
        tree.set(i, scale * (r.0 + r.1) * wsum[i]);
    };
    for i in 0..ns {
        update(i, &a, &b, &mut tree, &mut rates);
    }
    for (k, r) in ghost_rates.iter().enumerate() {
        tree.set(ns + k, *r);
    }

    let vol = ns as f64;
    let observe = |t: f64, a: &[u64], b: &[u64], log: &mut TrajectoryLog| -> Result<()> {
        let na: u64 = a.iter().sum();
        let mut row = vec![na as f64 / vol, (na + b.iter().sum::<u64>()) as f64];
        if two {
            row.push(b.iter().sum::<u64>() as f64 / vol);
        }
        let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let rho = block_profile(&af, &blks);
        if let (Some(nl), Some(r)) = (&nl, &reference) {
            row.push(block_functional(&rho, r, &blks, nl)?);
        }
        log.push(t, row);
        if opts.record_profiles {
            log.snapshots.push(Snapshot { t, values: rho });
        }
        Ok(())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; ns];
    let mut last = vec![opts.burn_in; ns];
    let mut t = 0.0;
    let mut k_obs = 0usize;
    let mut events = 0u64;
    let obs_time = |k: usize| (k as f64 * opts.obs_dt).min(opts.t_end);
    let n_obs = (opts.t_end / opts.obs_dt - 1e-9).ceil().max(0.0) as usize;
    let flush = |i: usize, t: f64, a: &[u64], acc: &mut [f64], last: &mut [f64]| {
        if t > last[i] {
            acc[i] += a[i] as f64 * (t - last[i]);
            last[i] = t;
        }
    };
    loop {
        let total = tree.total();
        if !total.is_finite() {
            return Err(MicroError::RateOverflow(total));
        }
        let t_next = if total > 0.0 { t + rng.sample::<f64, _>(Exp1) / total } else { f64::INFINITY };
        while k_obs <= n_obs && obs_time(k_obs) <= t_next {
            observe(obs_time(k_obs), &a, &b, &mut log)?;
            k_obs += 1;
        }
        if t_next > opts.t_end {
            break;
        }
        t = t_next;
        events += 1;
        if events > opts.max_events {
            return Err(MicroError::EventCap(opts.max_events));
        }
        let slot = tree.select(rng.gen());
        if slot >= ns {
            let site = ghosts[slot - ns].0;
            flush(site, t, &a, &mut acc, &mut last);
            a[site] += 1;
            update(site, &a, &b, &mut tree, &mut rates);
            continue;
        }
        let i = slot;
        let (ra, rb) = rates[i];
        let species_b = two && rng.gen::<f64>() * (ra + rb) >= ra;
        let mut pick = rng.gen::<f64>() * wsum[i];
        let mut target = targets[i][targets[i].len() - 1].0;
        for &(tg, w) in &targets[i] {
            if pick < w {
                target = tg;
                break;
            }
            pick -= w;
        }
        flush(i, t, &a, &mut acc, &mut last);
        if species_b {
            b[i] -= 1;
        } else {
            a[i] -= 1;
        }
        update(i, &a, &b, &mut tree, &mut rates);
        if let Target::Site(j) = target {
            flush(j, t, &a, &mut acc, &mut last);
            if species_b {
                b[j] += 1;
            } else {
                a[j] += 1;
            }
            update(j, &a, &b, &mut tree, &mut rates);
        }
    }
    for i in 0..ns {
        flush(i, opts.t_end, &a, &mut acc, &mut last);
    }
    let window = opts.t_end - opts.burn_in;
    let time_average = if window > 0.0 { acc.iter().map(|v| v / window).collect() } else { a.iter().map(|&v| v as f64).collect() };
    log.final_state = DensityField::new(a.iter().map(|&v| v as f64).collect());
    log.reference = reference.clone().map(DensityField::new);
    Ok(ZrpRun {
        log,
        time_average,
        final_state: Configuration { a, b: two.then_some(b) },
        events,
        reference,
        blocks: blks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_and_ring_conserve_particles() {
        for boundary in [ZrpBoundary::Ring, ZrpBoundary::Closed] {
            let m = ZrpModel::new(16, 1, Species::One(RateFn::Constant(1.0)), boundary)
                .with_field(FieldSpec::Constant([2.0, 0.0]));
            let eta = Configuration::single((0..16).map(|i| (i % 3) as u64).collect());
            let run = simulate_zrp(&m, &eta, &ZrpOptions::new(1.0, 0.05), 5).unwrap();
            let p = run.log.column("particles").unwrap();
            assert!(p.iter().all(|&v| v == p[0]));
            assert!(run.events > 1000);
        }
    }

    #[test]
    fn two_species_ring_conserves_each_species() {
        let m = ZrpModel::new(8, 2, Species::Two(PairRates::exponential_coupling(0.8)), ZrpBoundary::Ring);
        let a: Vec<u64> = (0..64).map(|i| (i % 2) as u64).collect();
        let b: Vec<u64> = (0..64).map(|i| (i % 3 == 0) as u64).collect();
        let run = simulate_zrp(&m, &Configuration::pair(a.clone(), b.clone()), &ZrpOptions::new(0.05, 0.01), 9).unwrap();
        let fin = run.final_state;
        assert_eq!(fin.a.iter().sum::<u64>(), a.iter().sum::<u64>());
        assert_eq!(fin.b.unwrap().iter().sum::<u64>(), b.iter().sum::<u64>());
    }

    #[test]
    fn two_species_rejects_bad_rates_and_reservoirs() {
        let bad = PairRates {
            label: "bad".into(),
            u: std::sync::Arc::new(|n, m| (n * (m + 1)) as f64),
            v: std::sync::Arc::new(|_, m| m as f64),
        };
        let m = ZrpModel::new(4, 1, Species::Two(bad), ZrpBoundary::Ring);
        let c = Configuration::pair(vec![1; 4], vec![1; 4]);
        assert!(matches!(simulate_zrp(&m, &c, &ZrpOptions::new(0.1, 0.1), 1), Err(MicroError::RateCondition { .. })));
        let m = ZrpModel::new(4, 1, Species::Two(PairRates::independent()), ZrpBoundary::Reservoirs { left: 1.0, right: 1.0 });
        assert!(matches!(simulate_zrp(&m, &c, &ZrpOptions::new(0.1, 0.1), 1), Err(MicroError::InvalidModel(_))));
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let m = ZrpModel::new(12, 1, Species::One(RateFn::Linear), ZrpBoundary::Reservoirs { left: 1.0, right: 2.0 });
        let eta = Configuration::single(vec![1; 12]);
        let o = ZrpOptions::new(0.1, 0.02).profiles();
        let r1 = simulate_zrp(&m, &eta, &o, 77).unwrap();
        let r2 = simulate_zrp(&m, &eta, &o, 77).unwrap();
        assert_eq!(r1.events, r2.events);
        assert_eq!(r1.log.to_csv(), r2.log.to_csv());
        assert_eq!(r1.final_state, r2.final_state);
        let r3 = simulate_zrp(&m, &eta, &o, 78).unwrap();
        assert_ne!(r1.final_state, r3.final_state);
    }

    #[test]
    fn reservoir_reference_is_linear_for_walkers() {
        let m = ZrpModel::new(10, 1, Species::One(RateFn::Linear), ZrpBoundary::Reservoirs { left: 1.0, right: 2.0 });
        let f = stationary_profile(&m, 0).unwrap().unwrap();
        for (i, v) in f.iter().enumerate() {
            assert!((v - (1.0 + (i + 1) as f64 / 11.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn biased_closed_reference_is_exponential() {
        // Detailed balance along the chain: u_{k+1} / u_k = exp(h E).
        let m = ZrpModel::new(8, 1, Species::One(RateFn::Linear), ZrpBoundary::Closed)
            .with_field(FieldSpec::Constant([1.5, 0.0]));
        let f = stationary_profile(&m, 40).unwrap().unwrap();
        assert!((f.iter().sum::<f64>() - 40.0).abs() < 1e-9);
        for k in 0..7 {
            assert!((f[k + 1] / f[k] - (1.5f64 / 8.0).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_reservoirs_stay_empty() {
        let m = ZrpModel::new(6, 1, Species::One(RateFn::Linear), ZrpBoundary::Reservoirs { left: 0.0, right: 0.0 });
        let run = simulate_zrp(&m, &Configuration::single(vec![0; 6]), &ZrpOptions::new(1.0, 0.5), 1).unwrap();
        assert_eq!(run.events, 0);
        assert_eq!(run.log.times, vec![0.0, 0.5, 1.0]);
    }
}
