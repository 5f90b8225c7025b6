//! One-site invariant measures of the zero range process, the fugacity
//! inversion `f = lambda phi'(lambda)` and product-measure sampling.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relent_core::entropy::ld_rate_f;
use relent_core::Nonlinearity;
use serde::Serialize;

use crate::error::{MicroError, Result};

/// Relative tail mass dropped by truncation.
pub const TAIL_TOL: f64 = 1e-12;
/// Hard cap on the truncation cutoff.
pub const HARD_CAP: usize = 1_000_000;

/// Jump rate `g(n)` of a site holding `n` particles, with `g(0) = 0`.
#[derive(Clone)]
pub enum RateFn {
    /// `g(n) = n`: independent walkers.
    Linear,
    /// `g(n) = c` for `n >= 1`.
    Constant(f64),
    /// `g(n) = c n^a`.
    Power { c: f64, a: f64 },
    /// User rate; `sup` is `lim g(n)` when finite.
    Custom { label: String, g: Arc<dyn Fn(u64) -> f64 + Send + Sync>, sup: Option<f64> },
}

impl fmt::Debug for RateFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RateFn({})", self.label())
    }
}

impl RateFn {
    pub fn custom(label: impl Into<String>, g: Arc<dyn Fn(u64) -> f64 + Send + Sync>, sup: Option<f64>) -> Self {
        Self::Custom { label: label.into(), g, sup }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Linear => "linear".into(),
            Self::Constant(c) => format!("constant({c})"),
            Self::Power { c, a } => format!("power(c={c}, a={a})"),
            Self::Custom { label, .. } => label.clone(),
        }
    }

    pub fn eval(&self, n: u64) -> f64 {
        if n == 0 {
            return 0.0;
        }
        match self {
            Self::Linear => n as f64,
            Self::Constant(c) => *c,
            Self::Power { c, a } => c * (n as f64).powf(*a),
            Self::Custom { g, .. } => g(n),
        }
    }

    /// `lim g(n)`, infinite for unbounded rates.
    pub fn sup(&self) -> f64 {
        match self {
            Self::Linear => f64::INFINITY,
            Self::Constant(c) => *c,
            Self::Power { c, a } => {
                if *a > 0.0 {
                    f64::INFINITY
                } else {
                    *c
                }
            }
            Self::Custom { sup, .. } => sup.unwrap_or(f64::INFINITY),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = match self {
            Self::Constant(c) => !(*c > 0.0 && c.is_finite()),
            Self::Power { c, a } => !(*c > 0.0 && c.is_finite() && *a >= 0.0 && a.is_finite()),
            _ => false,
        };
        if bad {
            return Err(MicroError::InvalidRate(format!("{} must be positive and nondecreasing", self.label())));
        }
        Ok(())
    }
}

/// Truncated one-site measure `m^lambda(k) = lambda^k / (Z g(1)...g(k))`.
#[derive(Debug, Clone, Serialize)]
pub struct SiteMeasure {
    pub lambda: f64,
    pub k_max: usize,
    pub probs: Vec<f64>,
    #[serde(skip)]
    cdf: Vec<f64>,
    /// `phi(lambda) = ln Z_lambda`.
    pub log_partition: f64,
    pub mean: f64,
    pub variance: f64,
    /// `E[g(eta)]`, equal to `lambda` up to truncation.
    pub mean_rate: f64,
}

impl SiteMeasure {
    pub fn new(rate: &RateFn, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(MicroError::InvalidModel(format!("fugacity {lambda}")));
        }
        if lambda == 0.0 {
            return Ok(Self {
                lambda,
                k_max: 0,
                probs: vec![1.0],
                cdf: vec![1.0],
                log_partition: 0.0,
                mean: 0.0,
                variance: 0.0,
                mean_rate: 0.0,
            });
        }
        if lambda >= rate.sup() {
            return Err(MicroError::OutOfRange { density: f64::INFINITY, max: f64::INFINITY });
        }
        let ll = lambda.ln();
        let mut lw = vec![0.0];
        let mut lmax: f64 = 0.0;
        let mut prev_g = 0.0;
        let mut k = 0usize;
        loop {
            if k >= HARD_CAP {
                return Err(MicroError::Truncation(HARD_CAP));
            }
            let g = rate.eval(k as u64 + 1);
            if !(g > 0.0 && g.is_finite()) || g < prev_g * (1.0 - 1e-12) {
                return Err(MicroError::InvalidRate(format!("g({}) = {g} is not positive and nondecreasing", k + 1)));
            }
            prev_g = g;
            let next = lw[k] + ll - g.ln();
            // With g nondecreasing the remaining terms decay at least
            // geometrically with ratio r = lambda / g(k+1).
            let r = lambda / g;
            if r < 1.0 && k > 0 {
                let tail = lw[k] - lmax + (r / (1.0 - r)).ln();
                if tail < (TAIL_TOL * 1e-2).ln() {
                    break;
                }
            }
            lw.push(next);
            lmax = lmax.max(next);
            k += 1;
        }
        let w: Vec<f64> = lw.iter().map(|v| (v - lmax).exp()).collect();
        let s: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|v| v / s).collect();
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cdf.push(acc);
        }
        let mean: f64 = probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        let variance = probs.iter().enumerate().map(|(k, p)| (k as f64 - mean).powi(2) * p).sum();
        let mean_rate = probs.iter().enumerate().map(|(k, p)| rate.eval(k as u64) * p).sum();
        Ok(Self { lambda, k_max: probs.len() - 1, probs, cdf, log_partition: lmax + s.ln(), mean, variance, mean_rate })
    }

    /// Inverse-CDF draw from a uniform `u` in `[0, 1)`.
    pub fn sample(&self, u: f64) -> u64 {
        let target = u * self.cdf[self.cdf.len() - 1];
        self.cdf.partition_point(|&c| c <= target).min(self.k_max) as u64
    }
}

/// Solves `E_{m^lambda}(eta) = f` for the fugacity.
pub fn fugacity_from_density(rate: &RateFn, f: f64) -> Result<f64> {
    rate.validate()?;
    if !(f >= 0.0 && f.is_finite()) {
        return Err(MicroError::OutOfRange { density: f, max: f64::INFINITY });
    }
    if f == 0.0 {
        return Ok(0.0);
    }
    match rate {
        RateFn::Linear => return Ok(f),
        RateFn::Constant(c) => return Ok(c * f / (1.0 + f)),
        _ => {}
    }
    let sup = rate.sup();
    // Newton in x = ln lambda, safeguarded by a bracket. Fugacities whose
    // measure cannot be truncated below the hard cap shrink the bracket.
    let mut lo = f64::NEG_INFINITY;
    let mut hi = if sup.is_finite() { sup.ln() } else { f64::INFINITY };
    let mut x = (f * rate.eval(1)).ln().min(hi - 1e-3);
    let mut attained: f64 = 0.0;
    for _ in 0..300 {
        let m = match SiteMeasure::new(rate, x.exp()) {
            Ok(m) => m,
            Err(MicroError::OutOfRange { .. }) | Err(MicroError::Truncation(_)) => {
                hi = x;
                x = if lo.is_finite() { 0.5 * (lo + hi) } else { hi - 1.0 };
                if hi - lo <= 1e-15 * hi.abs().max(1.0) {
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        attained = attained.max(m.mean);
        let r = m.mean - f;
        if r.abs() <= 1e-12 * f.max(1.0) {
            return Ok(m.lambda);
        }
        if r < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 1e-15 * hi.abs().max(1.0) {
            break;
        }
        let mut next = x - r / m.variance.max(1e-300);
        if !(next > lo && next < hi) {
            next = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo + 2.0,
                (false, true) => hi - 2.0,
                _ => unreachable!(),
            };
        }
        x = next;
    }
    if f > attained {
        return Err(MicroError::OutOfRange { density: f, max: attained });
    }
    Err(MicroError::NoConvergence(format!("fugacity for density {f}")))
}

/// Conductivity `sigma(f) = E_{m_f}(g) = lambda(f)`.
pub fn conductivity(rate: &RateFn, f: f64) -> Result<f64> {
    fugacity_from_density(rate, f)
}

/// `E_{m_f}(g)` summed directly over the truncated measure.
pub fn direct_conductivity(rate: &RateFn, f: f64) -> Result<f64> {
    let lambda = fugacity_from_density(rate, f)?;
    Ok(SiteMeasure::new(rate, lambda)?.mean_rate)
}

/// The conductivity as a nonlinearity for the macroscopic functionals,
/// valid on `[0, f_max]`.
pub fn conductivity_nonlinearity(rate: &RateFn, f_max: f64) -> Result<Nonlinearity> {
    match rate {
        RateFn::Linear => Ok(Nonlinearity::identity()),
        RateFn::Constant(c) => {
            let c = *c;
            Ok(Nonlinearity::from_fn(
                format!("zrp {}", rate.label()),
                Arc::new(move |f| c * f / (1.0 + f)),
                Some(Arc::new(move |f| c / ((1.0 + f) * (1.0 + f)))),
                f_max,
            )?)
        }
        _ => {
            let r1 = rate.clone();
            let r2 = rate.clone();
            Ok(Nonlinearity::from_fn(
                format!("zrp {}", rate.label()),
                Arc::new(move |f| fugacity_from_density(&r1, f).unwrap_or(f64::NAN)),
                Some(Arc::new(move |f| {
                    // d lambda / d f = lambda / Var.
                    let l = fugacity_from_density(&r2, f).unwrap_or(f64::NAN);
                    match SiteMeasure::new(&r2, l) {
                        Ok(m) if m.variance > 0.0 => l / m.variance,
                        _ => r2.eval(1),
                    }
                })),
                f_max,
            )?)
        }
    }
}

/// Draws a configuration with independent sites `eta_i ~ m_{f_i}`.
pub fn sample_product_measure(rate: &RateFn, profile: &[f64], seed: u64) -> Result<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: HashMap<u64, SiteMeasure> = HashMap::new();
    let mut eta = Vec::with_capacity(profile.len());
    for &f in profile {
        let key = f.to_bits();
        if !cache.contains_key(&key) {
            let m = SiteMeasure::new(rate, fugacity_from_density(rate, f)?)?;
            cache.insert(key, m);
        }
        let u: f64 = rng.gen();
        eta.push(cache[&key].sample(u));
    }
    Ok(eta)
}

/// Two-species rates `u(n, m)` for species A and `v(n, m)` for species B.
#[derive(Clone)]
pub struct PairRates {
    pub label: String,
    pub u: Arc<dyn Fn(u64, u64) -> f64 + Send + Sync>,
    pub v: Arc<dyn Fn(u64, u64) -> f64 + Send + Sync>,
}

impl fmt::Debug for PairRates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PairRates({})", self.label)
    }
}

impl PairRates {
    /// Independent species: `u = n`, `v = m`.
    pub fn independent() -> Self {
        Self { label: "independent".into(), u: Arc::new(|n, _| n as f64), v: Arc::new(|_, m| m as f64) }
    }

    /// `u = n c^m`, `v = m c^n`: coupled but factorizable.
    pub fn exponential_coupling(c: f64) -> Self {
        Self {
            label: format!("exponential_coupling({c})"),
            u: Arc::new(move |n, m| n as f64 * c.powi(m as i32)),
            v: Arc::new(move |n, m| m as f64 * c.powi(n as i32)),
        }
    }

    /// Largest relative violation of `u(n,m) / u(n,m-1) = v(n,m) / v(n-1,m)`
    /// over `1 <= n, m <= range`.
    pub fn check_condition(&self, range: u64) -> Result<f64> {
        let mut worst = 0.0;
        for n in 1..=range {
            for m in 1..=range {
                let a = (self.u)(n, m) * (self.v)(n - 1, m);
                let b = (self.v)(n, m) * (self.u)(n, m - 1);
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
                if !(rel.is_finite()) {
                    return Err(MicroError::InvalidRate(format!("non-finite rates at ({n}, {m})")));
                }
                if rel > 1e-10 {
                    return Err(MicroError::RateCondition { mismatch: rel, n, m });
                }
                worst = f64::max(worst, rel);
            }
        }
        Ok(worst)
    }
}

/// Truncated two-species site measure
/// `m(k, l) ~ lambda^k / (u(1,l)...u(k,l)) * gamma^l / (v(0,1)...v(0,l))`.
#[derive(Debug, Clone, Serialize)]
pub struct PairSiteMeasure {
    pub lambda: f64,
    pub gamma: f64,
    pub cutoff: usize,
    /// Row-major probabilities `probs[k * (cutoff + 1) + l]`.
    pub probs: Vec<f64>,
    #[serde(skip)]
    cdf: Vec<f64>,
    pub mean: [f64; 2],
}

impl PairSiteMeasure {
    pub fn new(rates: &PairRates, lambda: f64, gamma: f64) -> Result<Self> {
        if !(lambda >= 0.0 && gamma >= 0.0 && lambda.is_finite() && gamma.is_finite()) {
            return Err(MicroError::InvalidModel(format!("fugacities ({lambda}, {gamma})")));
        }
        let mut cutoff = 16usize;
        loop {
            let c = cutoff + 1;
            let mut lw = vec![f64::NEG_INFINITY; c * c];
            let mut b_part = 0.0;
            for l in 0..c {
                if l > 0 {
                    b_part += gamma.ln() - (rates.v)(0, l as u64).ln();
                }
                let mut a_part = 0.0;
                for k in 0..c {
                    if k > 0 {
                        a_part += lambda.ln() - (rates.u)(k as u64, l as u64).ln();
                    }
                    let v = match (k, l) {
                        (0, 0) => 0.0,
                        (0, _) => b_part,
                        (_, 0) => a_part,
                        _ => a_part + b_part,
                    };
                    lw[k * c + l] = if v.is_nan() { f64::NEG_INFINITY } else { v };
                }
            }
            let lmax = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = lw.iter().map(|v| (v - lmax).exp()).collect();
            let s: f64 = w.iter().sum();
            let edge: f64 = (0..c).map(|i| w[i * c + cutoff] + w[cutoff * c + i]).sum();
            if edge / s <= TAIL_TOL * 1e-2 {
                let probs: Vec<f64> = w.iter().map(|v| v / s).collect();
                let mut cdf = Vec::with_capacity(probs.len());
                let mut acc = 0.0;
                let mut mean = [0.0; 2];
                for (idx, p) in probs.iter().enumerate() {
                    acc += p;
                    cdf.push(acc);
                    mean[0] += (idx / c) as f64 * p;
                    mean[1] += (idx % c) as f64 * p;
                }
                return Ok(Self { lambda, gamma, cutoff, probs, cdf, mean });
            }
            cutoff *= 2;
            if cutoff > 4096 {
                return Err(MicroError::Truncation(cutoff));
            }
        }
    }

    pub fn prob(&self, k: usize, l: usize) -> f64 {
        if k > self.cutoff || l > self.cutoff {
            return 0.0;
        }
        self.probs[k * (self.cutoff + 1) + l]
    }

    pub fn sample(&self, u: f64) -> (u64, u64) {
        let target = u * self.cdf[self.cdf.len() - 1];
        let idx = self.cdf.partition_point(|&c| c <= target).min(self.cdf.len() - 1);
        let c = self.cutoff + 1;
        ((idx / c) as u64, (idx % c) as u64)
    }
}

/// Draws an i.i.d. two-species configuration from `m^{lambda, gamma}`.
pub fn sample_pair_product_measure(rates: &PairRates, lambda: f64, gamma: f64, sites: usize, seed: u64) -> Result<Vec<(u64, u64)>> {
    let m = PairSiteMeasure::new(rates, lambda, gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..sites).map(|_| m.sample(rng.gen())).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct LegendreRow {
    pub f: f64,
    pub legendre: f64,
    pub rate_function: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LegendreReport {
    pub f_inf: f64,
    pub rows: Vec<LegendreRow>,
    pub max_mismatch: f64,
}

/// Compares `sup_gamma { gamma f - psi(gamma) }`, with
/// `psi(gamma) = phi(e^gamma lambda) - phi(lambda)`, against the integral
/// form `F(f | f_inf)` on each grid density.
pub fn legendre_check(rate: &RateFn, f_inf: f64, f_grid: &[f64]) -> Result<LegendreReport> {
    let lambda = fugacity_from_density(rate, f_inf)?;
    let phi0 = SiteMeasure::new(rate, lambda)?.log_partition;
    let sup = rate.sup();
    let psi = |g: f64| -> f64 {
        let l = g.exp() * lambda;
        if l >= sup {
            return f64::INFINITY;
        }
        SiteMeasure::new(rate, l).map(|m| m.log_partition - phi0).unwrap_or(f64::INFINITY)
    };
    let f_max = f_grid.iter().cloned().fold(f_inf, f64::max) * 1.5 + 1.0;
    let nl = conductivity_nonlinearity(rate, f_max)?;
    let mut rows = Vec::with_capacity(f_grid.len());
    let mut worst: f64 = 0.0;
    for &f in f_grid {
        if !(f > 0.0) {
            return Err(MicroError::OutOfRange { density: f, max: f64::INFINITY });
        }
        let obj = |g: f64| g * f - psi(g);
        // Bracket the maximum of the concave objective.
        let mut step = 0.5;
        let (mut a, mut b) = (-step, step);
        while obj(a) > obj(0.5 * (a + b)) {
            a -= step;
            step *= 2.0;
            if a < -200.0 {
                break;
            }
        }
        step = 0.5;
        while obj(b) > obj(0.5 * (a + b)) {
            b += step;
            step *= 2.0;
            if b > 200.0 {
                break;
            }
        }
        let invphi = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - invphi * (b - a);
        let mut d = a + invphi * (b - a);
        let (mut fc, mut fd) = (obj(c), obj(d));
        while b - a > 1e-11 * (1.0 + a.abs().max(b.abs())) {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - invphi * (b - a);
                fc = obj(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + invphi * (b - a);
                fd = obj(d);
            }
        }
        let legendre = obj(0.5 * (a + b));
        let rf = ld_rate_f(f, f_inf, &nl)?;
        worst = worst.max((legendre - rf).abs());
        rows.push(LegendreRow { f, legendre, rate_function: rf });
    }
    Ok(LegendreReport { f_inf, rows, max_mismatch: worst })
}
