//! Two-species cross-diffusion: compatibility relations, the system
//! functionals built from the potential `G`, the Einstein relation and
//! coupled evolution.
//!
//! For a pair `(sigma1, sigma2)` the potential is
//!
//! ```text
//! G(f) = int_{fi1}^{f1} ln(sigma1(s, f2) / sigma1(fi)) ds
//!      + int_{fi2}^{f2} ln(sigma2(fi1, s) / sigma2(fi)) ds
//! ```
//!
//! whose gradient is `(ln sigma1(f)/sigma1(fi), ln sigma2(f)/sigma2(fi))`
//! exactly when `d2 ln sigma1 = d1 ln sigma2`. The dual functional replaces
//! logarithmic ratios by differences and needs `d2 sigma1 = d1 sigma2`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evolve::{EvolveFailure, TimeStepper, TrajectoryLog};
use crate::generator::DiscreteGenerator;
use crate::model::DensityField;
use crate::quadrature::{integrate, QuadOptions};
use crate::spectral::{dirichlet_eigenvalue, elementary_constant_ck, DecayCertificate};

pub type PairFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type PairGrad = Arc<dyn Fn(f64, f64) -> [f64; 2] + Send + Sync>;

/// Nonlinearities `sigma1(s1, s2)`, `sigma2(s1, s2)` of a two-species system.
#[derive(Clone)]
pub struct SpeciesPair {
    label: String,
    sigma: [PairFn; 2],
    grad: [Option<PairGrad>; 2],
}

impl fmt::Debug for SpeciesPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SpeciesPair({})", self.label)
    }
}

impl SpeciesPair {
    pub fn new(label: impl Into<String>, sigma1: PairFn, sigma2: PairFn) -> Self {
        Self { label: label.into(), sigma: [sigma1, sigma2], grad: [None, None] }
    }

    /// Supplies analytic partial derivatives `(d1, d2)` for both species.
    pub fn with_partials(mut self, g1: PairGrad, g2: PairGrad) -> Self {
        self.grad = [Some(g1), Some(g2)];
        self
    }

    /// `sigma1 = sigma2 = (s1 + s2)^m`.
    pub fn sum_power(m: f64) -> Result<Self> {
        if !(m >= 1.0 && m.is_finite()) {
            return Err(Error::InvalidNonlinearity(format!("exponent {m} must be at least 1")));
        }
        let f: PairFn = Arc::new(move |a, b| (a + b).max(0.0).powf(m));
        let g: PairGrad = Arc::new(move |a, b| {
            let d = m * (a + b).max(0.0).powf(m - 1.0);
            [d, d]
        });
        Ok(Self::new(format!("sum_power(m={m})"), f.clone(), f).with_partials(g.clone(), g))
    }

    /// `sigma1 = sigma2 = phi(s1 + s2)`.
    pub fn sum_fn(label: impl Into<String>, phi: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> Self {
        let p = phi.clone();
        let f: PairFn = Arc::new(move |a, b| p(a + b));
        Self::new(label, f.clone(), f)
    }

    /// `sigma1 = s1`, `sigma2 = s2`.
    pub fn decoupled_identity() -> Self {
        Self::new("decoupled", Arc::new(|a, _| a), Arc::new(|_, b| b))
            .with_partials(Arc::new(|_, _| [1.0, 0.0]), Arc::new(|_, _| [0.0, 1.0]))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval(&self, species: usize, s: [f64; 2]) -> f64 {
        (self.sigma[species])(s[0], s[1])
    }

    /// `(d1 sigma_i, d2 sigma_i)` at `s`, analytic if supplied.
    pub fn partials(&self, species: usize, s: [f64; 2]) -> [f64; 2] {
        if let Some(g) = &self.grad[species] {
            return g(s[0], s[1]);
        }
        let f = &self.sigma[species];
        let h1 = 1e-6 * (1.0 + s[0].abs());
        let h2 = 1e-6 * (1.0 + s[1].abs());
        [
            (f(s[0] + h1, s[1]) - f(s[0] - h1, s[1])) / (2.0 * h1),
            (f(s[0], s[1] + h2) - f(s[0], s[1] - h2)) / (2.0 * h2),
        ]
    }

    /// Jacobian `D[i][j] = d_j sigma_i`.
    pub fn jacobian(&self, s: [f64; 2]) -> [[f64; 2]; 2] {
        [self.partials(0, s), self.partials(1, s)]
    }
}

/// Densities of both species on a shared state space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairField {
    pub f1: DensityField,
    pub f2: DensityField,
}

impl PairField {
    pub fn new(f1: DensityField, f2: DensityField) -> Result<Self> {
        if f1.len() != f2.len() {
            return Err(Error::DimensionMismatch { expected: f1.len(), got: f2.len() });
        }
        f1.validate(f1.len())?;
        f2.validate(f2.len())?;
        Ok(Self { f1, f2 })
    }

    pub fn len(&self) -> usize {
        self.f1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f1.is_empty()
    }

    pub fn at(&self, x: usize) -> [f64; 2] {
        [self.f1.values[x], self.f2.values[x]]
    }

    /// `f1 + f2` per state.
    pub fn total(&self) -> DensityField {
        DensityField::new(self.f1.values.iter().zip(&self.f2.values).map(|(a, b)| a + b).collect())
    }
}

/// Rectangle `[lo, hi]` sampled on an `n x n` grid.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SampleBox {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub n: usize,
}

impl SampleBox {
    pub fn new(lo: [f64; 2], hi: [f64; 2], n: usize) -> Self {
        Self { lo, hi, n }
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        let n = self.n.max(2);
        let mut pts = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let a = self.lo[0] + (self.hi[0] - self.lo[0]) * i as f64 / (n - 1) as f64;
                let b = self.lo[1] + (self.hi[1] - self.lo[1]) * j as f64 / (n - 1) as f64;
                pts.push([a, b]);
            }
        }
        pts
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.lo[0] + self.hi[0]), 0.5 * (self.lo[1] + self.hi[1])]
    }

    /// Smallest box containing both fields, with a small positive floor.
    pub fn covering(a: &PairField, b: &PairField) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in [a, b] {
            for x in 0..p.len() {
                let s = p.at(x);
                for k in 0..2 {
                    lo[k] = lo[k].min(s[k]);
                    hi[k] = hi[k].max(s[k]);
                }
            }
        }
        for k in 0..2 {
            lo[k] = lo[k].max(1e-6);
            if hi[k] <= lo[k] {
                hi[k] = lo[k] * 1.01 + 1e-6;
            }
        }
        Self { lo, hi, n: 9 }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CompatReport {
    pub max_mismatch: f64,
    pub worst_point: [f64; 2],
    pub pass: bool,
}

const COMPAT_TOL: f64 = 1e-8;

fn compat(pair: &SpeciesPair, bx: &SampleBox, log: bool) -> Result<CompatReport> {
    let mut worst = 0.0;
    let mut at = bx.lo;
    for s in bx.points() {
        let (a, b) = (pair.partials(0, s)[1], pair.partials(1, s)[0]);
        let mismatch = if log {
            let (p, q) = (pair.eval(0, s), pair.eval(1, s));
            if !(p > 0.0 && q > 0.0) {
                return Err(Error::InvalidNonlinearity(format!("sigma not positive at {s:?}")));
            }
            (a / p - b / q).abs()
        } else {
            (a - b).abs()
        };
        if !(mismatch <= worst) {
            worst = mismatch;
            at = s;
        }
    }
    Ok(CompatReport { max_mismatch: worst, worst_point: at, pass: worst <= COMPAT_TOL })
}

/// Checks `d2 ln sigma1 = d1 ln sigma2` on the sample box.
pub fn check_compat_phi(pair: &SpeciesPair, bx: &SampleBox) -> Result<CompatReport> {
    compat(pair, bx, true)
}

/// Checks `d2 sigma1 = d1 sigma2` on the sample box.
pub fn check_compat_psi(pair: &SpeciesPair, bx: &SampleBox) -> Result<CompatReport> {
    compat(pair, bx, false)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct JacobianReport {
    /// Smallest eigenvalue of the symmetric part of the Jacobian.
    pub min_eigenvalue: f64,
    pub positive_definite: bool,
    pub positive_semidefinite: bool,
}

/// Definiteness of the Jacobian of `(sigma1, sigma2)` over the box.
pub fn check_jacobian(pair: &SpeciesPair, bx: &SampleBox) -> JacobianReport {
    let mut min_eig = f64::INFINITY;
    let mut scale: f64 = 0.0;
    for s in bx.points() {
        let d = pair.jacobian(s);
        let (a, c) = (d[0][0], d[1][1]);
        let b = 0.5 * (d[0][1] + d[1][0]);
        let mean = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        min_eig = min_eig.min(mean - rad);
        scale = scale.max(mean.abs() + rad);
    }
    JacobianReport {
        min_eigenvalue: min_eig,
        positive_definite: min_eig > 1e-12 * scale,
        positive_semidefinite: min_eig >= -1e-10 * scale,
    }
}

fn quad() -> QuadOptions {
    QuadOptions { abs_tol: 1e-15, rel_tol: 1e-14, max_intervals: 2000 }
}

/// Potential `G` for the entropy, integrating species 1 at the live `f2`
/// and species 2 at the anchored `fi1`.
pub fn potential_h(pair: &SpeciesPair, f: [f64; 2], fi: [f64; 2]) -> Result<f64> {
    let (r1, r2) = (pair.eval(0, fi), pair.eval(1, fi));
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(Error::DegenerateReference { cell: 0, value: r1.min(r2) });
    }
    let a = integrate(|s| (pair.eval(0, [s, f[1]]) / r1).ln(), fi[0], f[0], quad())?;
    let b = integrate(|s| (pair.eval(1, [fi[0], s]) / r2).ln(), fi[1], f[1], quad())?;
    Ok(a + b)
}

/// Same potential along the other path: species 2 at the live `f1` first,
/// then species 1 at the anchored `fi2`. Agrees with [`potential_h`] only
/// under the compatibility relation.
pub fn potential_h_alternate(pair: &SpeciesPair, f: [f64; 2], fi: [f64; 2]) -> Result<f64> {
    let (r1, r2) = (pair.eval(0, fi), pair.eval(1, fi));
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(Error::DegenerateReference { cell: 0, value: r1.min(r2) });
    }
    let a = integrate(|s| (pair.eval(1, [f[0], s]) / r2).ln(), fi[1], f[1], quad())?;
    let b = integrate(|s| (pair.eval(0, [s, fi[1]]) / r1).ln(), fi[0], f[0], quad())?;
    Ok(a + b)
}

/// Potential for the dual entropy with `Psi(z) = z^2 / 2`.
pub fn potential_n(pair: &SpeciesPair, f: [f64; 2], fi: [f64; 2]) -> Result<f64> {
    let (r1, r2) = (pair.eval(0, fi), pair.eval(1, fi));
    let a = integrate(|s| pair.eval(0, [s, f[1]]) - r1, fi[0], f[0], quad())?;
    let b = integrate(|s| pair.eval(1, [fi[0], s]) - r2, fi[1], f[1], quad())?;
    Ok(a + b)
}

/// Compares a finite-difference gradient of `g` with the expected gradient
/// at five seeded random points of the box.
fn gradient_identity(
    g: impl Fn([f64; 2]) -> Result<f64>,
    expected: impl Fn([f64; 2]) -> [f64; 2],
    bx: &SampleBox,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let p = [rng.gen_range(bx.lo[0]..=bx.hi[0]), rng.gen_range(bx.lo[1]..=bx.hi[1])];
        let e = expected(p);
        for k in 0..2 {
            let h = 1e-5 * (1.0 + p[k].abs());
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            let fd = (g(a)? - g(b)?) / (2.0 * h);
            worst = worst.max((fd - e[k]).abs());
        }
    }
    Ok(worst)
}

fn check_inputs(pf: &PairField, pf_inf: &PairField, nu: &[f64]) -> Result<()> {
    if pf.len() != pf_inf.len() || nu.len() != pf.len() {
        return Err(Error::DimensionMismatch { expected: pf_inf.len(), got: pf.len().min(nu.len()) });
    }
    Ok(())
}

/// System entropy `sum_x nu_x G(f(x); f_inf(x))`.
///
/// Fails if the compatibility relation does not hold on the range of the
/// data, or if the gradient of `G` does not match the logarithmic ratios.
pub fn system_h_phi(pf: &PairField, pf_inf: &PairField, pair: &SpeciesPair, nu: &[f64]) -> Result<f64> {
    check_inputs(pf, pf_inf, nu)?;
    let bx = SampleBox::covering(pf, pf_inf);
    let rep = check_compat_phi(pair, &bx)?;
    if !rep.pass {
        return Err(Error::Incompatible { mismatch: rep.max_mismatch });
    }
    let anchor = pf_inf.at(0);
    let mismatch = gradient_identity(
        |p| potential_h(pair, p, anchor),
        |p| [(pair.eval(0, p) / pair.eval(0, anchor)).ln(), (pair.eval(1, p) / pair.eval(1, anchor)).ln()],
        &bx,
    )?;
    if mismatch > 1e-6 {
        return Err(Error::Incompatible { mismatch });
    }
    let mut total = 0.0;
    for x in 0..pf.len() {
        total += nu[x] * potential_h(pair, pf.at(x), pf_inf.at(x))?;
    }
    Ok(total)
}

/// System dual entropy with `Psi(z) = z^2 / 2`.
pub fn system_n_psi(pf: &PairField, pf_inf: &PairField, pair: &SpeciesPair, nu: &[f64]) -> Result<f64> {
    check_inputs(pf, pf_inf, nu)?;
    let bx = SampleBox::covering(pf, pf_inf);
    let rep = check_compat_psi(pair, &bx)?;
    if !rep.pass {
        return Err(Error::Incompatible { mismatch: rep.max_mismatch });
    }
    let anchor = pf_inf.at(0);
    let mismatch = gradient_identity(
        |p| potential_n(pair, p, anchor),
        |p| [pair.eval(0, p) - pair.eval(0, anchor), pair.eval(1, p) - pair.eval(1, anchor)],
        &bx,
    )?;
    if mismatch > 1e-6 {
        return Err(Error::Incompatible { mismatch });
    }
    let mut total = 0.0;
    for x in 0..pf.len() {
        total += nu[x] * potential_n(pair, pf.at(x), pf_inf.at(x))?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EinsteinReport {
    pub max_residual: f64,
    pub worst_point: [f64; 2],
    pub pass: bool,
}

/// Checks `D = S H` on the box, with `D` the Jacobian of the pair, `S` the
/// diagonal of the sigmas and `H` the Hessian of the potential `G` of
/// [`potential_h`] anchored at the box center.
///
/// `H` is a fourth-order difference of the gradient of that same `G`:
/// `d1 G = ln(sigma1 / r1)` and `d2 G` is the path integral of
/// `d2 sigma1 / sigma1` plus `ln(sigma2 / r2)` at the anchor. Differencing
/// the gradient keeps quadrature noise at `eps / h` instead of `eps / h^2`.
pub fn einstein_check(pair: &SpeciesPair, bx: &SampleBox) -> Result<EinsteinReport> {
    let anchor = bx.center();
    let (r1, r2) = (pair.eval(0, anchor), pair.eval(1, anchor));
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(Error::DegenerateReference { cell: 0, value: r1.min(r2) });
    }
    let opts = QuadOptions { abs_tol: 1e-15, rel_tol: 1e-14, max_intervals: 200 };
    let grad = |p: [f64; 2]| -> Result<[f64; 2]> {
        let g1 = (pair.eval(0, p) / r1).ln();
        // Difference-quotient partials are noisy at the 1e-10 level; their
        // best estimate then shows up in the residual.
        let path = match integrate(|s| pair.partials(0, [s, p[1]])[1] / pair.eval(0, [s, p[1]]), anchor[0], p[0], opts) {
            Err(Error::Quadrature { estimate, .. }) => estimate,
            other => other?,
        };
        Ok([g1, path + (pair.eval(1, [anchor[0], p[1]]) / r2).ln()])
    };
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut at = anchor;
    for s in bx.points() {
        let mut hess = [[0.0; 2]; 2];
        for j in 0..2 {
            let shifted = |t: f64| {
                let mut p = s;
                p[j] += t * h;
                grad(p)
            };
            let (m2, m1, p1, p2) = (shifted(-2.0)?, shifted(-1.0)?, shifted(1.0)?, shifted(2.0)?);
            for i in 0..2 {
                hess[i][j] = (m2[i] - 8.0 * m1[i] + 8.0 * p1[i] - p2[i]) / (12.0 * h);
            }
        }
        let d = pair.jacobian(s);
        let sg = [pair.eval(0, s), pair.eval(1, s)];
        for i in 0..2 {
            for j in 0..2 {
                let r = (d[i][j] - sg[i] * hess[i][j]).abs();
                if !(r <= worst) {
                    worst = r;
                    at = s;
                }
            }
        }
    }
    Ok(EinsteinReport { max_residual: worst, worst_point: at, pass: worst <= 1e-8 })
}

fn pair_rates(gen: &DiscreteGenerator, pair: &SpeciesPair, z: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = gen.n();
    let mut out = vec![[0.0; 2]; n];
    for i in 0..2 {
        let u: Vec<f64> = z.iter().map(|s| pair.eval(i, *s)).collect();
        let r = gen.apply(&u);
        for x in 0..n {
            out[x][i] = if gen.is_clamped(x) { 0.0 } else { r[x] };
        }
    }
    out
}

/// One implicit Euler step for both species by Newton's method.
fn pair_step(
    gen: &DiscreteGenerator,
    pair: &SpeciesPair,
    z: &mut [[f64; 2]],
    dt: f64,
    t: f64,
    tol: f64,
    max_iters: usize,
) -> Result<usize> {
    let nu = gen.nu();
    let free = gen.free_states();
    let old: Vec<[f64; 2]> = z.to_vec();
    let bw = 2 * gen.free_bandwidth() + 1;
    let mut last = f64::INFINITY;
    for it in 0..=max_iters {
        let r = pair_rates(gen, pair, z);
        let mut res = vec![0.0; 2 * free.len()];
        let mut rnorm: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (k, &x) in free.iter().enumerate() {
            for i in 0..2 {
                res[2 * k + i] = z[x][i] - old[x][i] - dt * r[x][i];
                rnorm = rnorm.max(res[2 * k + i].abs());
                // Gross flow term: with large steps its rounding error
                // dominates the residual.
                let gross = dt * gen.total_rate(x) * pair.eval(i, z[x]).abs();
                scale = scale.max(z[x][i].abs()).max(old[x][i].abs()).max(gross);
            }
        }
        if !rnorm.is_finite() {
            return Err(Error::NewtonFailure { time: t + dt, residual: rnorm });
        }
        if rnorm <= tol * scale.max(1e-300) {
            return Ok(it);
        }
        last = rnorm;
        if it == max_iters {
            break;
        }
        let mut jac = crate::linalg::BandMatrix::zeros(2 * free.len(), bw, bw);
        for (k, &x) in free.iter().enumerate() {
            for i in 0..2 {
                jac.add(2 * k + i, 2 * k + i, nu[x] * (1.0 + 1e-12));
            }
        }
        for &y in free {
            let fy = gen.free_index(y).unwrap();
            let d = pair.jacobian(z[y]);
            for (x, kr) in gen.outgoing(y) {
                let w = dt * kr * nu[y];
                for i in 0..2 {
                    for j in 0..2 {
                        jac.add(2 * fy + i, 2 * fy + j, w * d[i][j]);
                        if let Some(fx) = gen.free_index(x) {
                            jac.add(2 * fx + i, 2 * fy + j, -w * d[i][j]);
                        }
                    }
                }
            }
        }
        let lu = jac.factor().map_err(|_| Error::NewtonFailure { time: t + dt, residual: rnorm })?;
        let mut step: Vec<f64> = (0..res.len()).map(|k| -nu[free[k / 2]] * res[k]).collect();
        lu.solve_in_place(&mut step);
        let mut lambda = 1.0;
        let mut tries = 0;
        while free
            .iter()
            .enumerate()
            .any(|(k, &x)| (0..2).any(|i| z[x][i] + lambda * step[2 * k + i] < 0.0))
        {
            lambda *= 0.5;
            tries += 1;
            if tries > 60 {
                return Err(Error::NegativeDensity { cell: free[0], value: -1.0, time: t + dt });
            }
        }
        for (k, &x) in free.iter().enumerate() {
            for i in 0..2 {
                z[x][i] += lambda * step[2 * k + i];
            }
        }
    }
    Err(Error::NewtonFailure { time: t + dt, residual: last })
}

fn to_pairs(pf: &PairField) -> Vec<[f64; 2]> {
    (0..pf.len()).map(|x| pf.at(x)).collect()
}

fn from_pairs(z: &[[f64; 2]]) -> PairField {
    PairField {
        f1: DensityField::new(z.iter().map(|s| s[0]).collect()),
        f2: DensityField::new(z.iter().map(|s| s[1]).collect()),
    }
}

/// Drives a pair to its steady state by implicit Euler with growing steps.
/// For pairs with a conserved combination the limit depends on `f0`.
pub fn relax_pair(gen: &DiscreteGenerator, pair: &SpeciesPair, f0: &PairField) -> Result<PairField> {
    let mut z = to_pairs(f0);
    let mut dt = 1e-4;
    let umax = |z: &[[f64; 2]]| {
        z.iter().map(|s| pair.eval(0, *s).abs().max(pair.eval(1, *s).abs())).fold(0.0, f64::max)
    };
    for _ in 0..400 {
        let r = pair_rates(gen, pair, &z);
        let res = r.iter().map(|v| v[0].abs().max(v[1].abs())).fold(0.0, f64::max);
        if res <= 1e-12 * gen.max_outflow() * umax(&z).max(1e-300) {
            return Ok(from_pairs(&z));
        }
        pair_step(gen, pair, &mut z, dt, 0.0, 1e-12, 50)?;
        dt = (dt * 2.0).min(1e6);
    }
    Err(Error::ResidualTooLarge { residual: f64::NAN, tolerance: 1e-12 })
}

/// Implicit Euler for the coupled system. Logs `H_sys` and/or `N_sys`
/// relative to `reference` when the corresponding compatibility relation
/// holds, together with the interior mass of each species.
pub fn evolve_pair(
    gen: &DiscreteGenerator,
    pair: &SpeciesPair,
    f0: &PairField,
    reference: &PairField,
    stepper: &TimeStepper,
) -> std::result::Result<TrajectoryLog, EvolveFailure> {
    let nu = gen.nu();
    let probe = SampleBox::covering(f0, reference);
    let log_h = check_compat_phi(pair, &probe).map_or(false, |r| r.pass);
    let log_n = check_compat_psi(pair, &probe).map_or(false, |r| r.pass);
    let mut cols = Vec::new();
    if log_h {
        cols.push("H_sys".to_string());
    }
    if log_n {
        cols.push("N_sys".to_string());
    }
    cols.push("mass1".into());
    cols.push("mass2".into());
    let mut log = TrajectoryLog::new(cols);
    let n = gen.n();
    if f0.len() != n || reference.len() != n {
        let e = Error::DimensionMismatch { expected: n, got: f0.len() };
        return Err(EvolveFailure { error: e, log });
    }
    let record = |log: &mut TrajectoryLog, t: f64, z: &[[f64; 2]]| -> Result<()> {
        let pf = from_pairs(z);
        let mut row = Vec::new();
        if log_h {
            let mut s = 0.0;
            for x in 0..n {
                s += nu[x] * potential_h(pair, pf.at(x), reference.at(x))?;
            }
            row.push(s);
        }
        if log_n {
            let mut s = 0.0;
            for x in 0..n {
                s += nu[x] * potential_n(pair, pf.at(x), reference.at(x))?;
            }
            row.push(s);
        }
        for i in 0..2 {
            row.push(gen.free_states().iter().map(|&x| nu[x] * z[x][i]).sum());
        }
        log.push(t, row);
        if stepper.store_densities {
            log.snapshots.push(crate::evolve::Snapshot { t, values: z.iter().flat_map(|s| [s[0], s[1]]).collect() });
        }
        Ok(())
    };
    let mut z = to_pairs(f0);
    if let Err(e) = record(&mut log, 0.0, &z) {
        return Err(EvolveFailure { error: e, log });
    }
    let steps = ((stepper.t_end / stepper.dt) - 1e-9).ceil().max(0.0) as usize;
    let mut t = 0.0;
    for k in 1..=steps {
        let dt = if k == steps { stepper.t_end - t } else { stepper.dt };
        let good = z.clone();
        match pair_step(gen, pair, &mut z, dt, t, stepper.newton_tol, stepper.newton_max_iters) {
            Ok(its) => log.newton_iterations += its,
            Err(e) => {
                log.final_state = from_pairs(&good).total();
                return Err(EvolveFailure { error: e, log });
            }
        }
        t = if k == steps { stepper.t_end } else { k as f64 * stepper.dt };
        if k % stepper.snapshot_stride == 0 || k == steps {
            if let Err(e) = record(&mut log, t, &z) {
                return Err(EvolveFailure { error: e, log });
            }
        }
    }
    // The final state is stored flattened as (f1, f2) per state.
    log.final_state = DensityField::new(z.iter().flat_map(|s| [s[0], s[1]]).collect());
    Ok(log)
}

/// Decay certificate for `sigma1 = sigma2 = (s1 + s2)^m`. The total
/// `S = f1 + f2` solves the scalar equation with nonlinearity `2 S^m`, so the
/// scalar certificate applies with twice the rate: `2 lambda_D C_K` with
/// `K = [min S_inf, max S_inf]` over free states.
pub fn sum_power_certificate(grid: &crate::model::Grid, m: f64, reference: &PairField) -> Result<DecayCertificate> {
    let total = reference.total();
    let free: Vec<f64> =
        (0..grid.len()).filter(|&x| !grid.is_boundary(x)).map(|x| total.values[x]).collect();
    let lo = free.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = free.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo > 0.0) {
        return Err(Error::DegenerateReference { cell: 0, value: lo });
    }
    let mut cert = DecayCertificate::new(dirichlet_eigenvalue(grid)?, elementary_constant_ck(m, lo, hi)?);
    cert.lambda *= 2.0;
    Ok(cert)
}

/// Splits a flattened `(f1, f2)` state back into a pair field.
pub fn unflatten(values: &[f64]) -> PairField {
    let z: Vec<[f64; 2]> = values.chunks(2).map(|c| [c[0], c[1]]).collect();
    from_pairs(&z)
}
