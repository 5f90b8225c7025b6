//! Finite-state nonlinear scattering processes: kernel input, stationarity
//! and reversibility classification, and time evolution.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evolve::{evolve, EntropySpec, EvolveFailure, TimeStepper, TrajectoryLog};
use crate::generator::DiscreteGenerator;
use crate::model::{DensityField, Nonlinearity};
use crate::stationary::{solve_stationary, StationaryOptions, StationaryState};

/// Rate kernel on a finite state space with a reference measure and an
/// optional set of clamped (reservoir) states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelSpec {
    pub n_states: usize,
    pub rates: Vec<(usize, usize, f64)>,
    pub nu: Vec<f64>,
    pub clamps: Vec<(usize, f64)>,
}

impl KernelSpec {
    pub fn new(nu: Vec<f64>, rates: Vec<(usize, usize, f64)>) -> Result<Self> {
        let k = Self { n_states: nu.len(), rates, nu, clamps: Vec::new() };
        k.generator()?;
        Ok(k)
    }

    /// Clamps `state` to the density `value`.
    pub fn with_clamp(mut self, state: usize, value: f64) -> Result<Self> {
        if state >= self.n_states {
            return Err(Error::InvalidKernel(format!("clamp state {state} out of range")));
        }
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::InvalidKernel(format!("clamp value {value} must be nonnegative")));
        }
        self.clamps.retain(|c| c.0 != state);
        self.clamps.push((state, value));
        Ok(self)
    }

    /// Parses `x y rate` triples, one per line. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse_coo(text: &str, nu: Vec<f64>) -> Result<Self> {
        let mut rates = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
            if parts.len() != 3 {
                return Err(Error::InvalidKernel(format!("line {}: expected 3 fields, got {}", ln + 1, parts.len())));
            }
            let bad = |what: &str| Error::InvalidKernel(format!("line {}: cannot parse {what}", ln + 1));
            let x: usize = parts[0].parse().map_err(|_| bad("source"))?;
            let y: usize = parts[1].parse().map_err(|_| bad("target"))?;
            let k: f64 = parts[2].parse().map_err(|_| bad("rate"))?;
            rates.push((x, y, k));
        }
        Self::new(nu, rates)
    }

    pub fn generator(&self) -> Result<DiscreteGenerator> {
        let mut clamped = vec![false; self.n_states];
        for &(s, _) in &self.clamps {
            clamped[s] = true;
        }
        DiscreteGenerator::from_rates(self.nu.clone(), &self.rates, clamped)
    }

    /// Field holding the clamp values (zero elsewhere).
    pub fn boundary_field(&self) -> DensityField {
        let mut v = vec![0.0; self.n_states];
        for &(s, val) in &self.clamps {
            v[s] = val;
        }
        DensityField::new(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Classification {
    pub stationary: bool,
    pub reversible: bool,
    pub stationarity_residual: f64,
    pub reversibility_residual: f64,
    /// Largest outgoing flow `w_x sum_y K(x,y)`, the reference for both tests.
    pub scale: f64,
}

/// Classifies the measure `w` (per-state masses, e.g. `sigma(f) nu`) as
/// stationary and/or reversible for the kernel.
pub fn classify(w: &[f64], kernel: &KernelSpec) -> Result<Classification> {
    let gen = kernel.generator()?;
    if w.len() != gen.n() {
        return Err(Error::DimensionMismatch { expected: gen.n(), got: w.len() });
    }
    let scale = (0..gen.n()).map(|x| gen.total_rate(x) * w[x].abs()).fold(0.0, f64::max);
    let r = gen.apply_measure(w);
    let stat = gen.free_states().iter().map(|&x| r[x].abs()).fold(0.0, f64::max);
    let (rev, _) = gen.detailed_balance_residual(w);
    let tol = 1e-12 * scale;
    Ok(Classification {
        stationary: stat <= tol,
        reversible: rev <= tol,
        stationarity_residual: stat,
        reversibility_residual: rev,
        scale,
    })
}

/// Stationary density for the kernel: clamp values on reservoir states, or
/// the mass of `f0` for closed kernels.
pub fn markov_stationary(kernel: &KernelSpec, nl: &Nonlinearity, f0: &DensityField) -> Result<StationaryState> {
    let gen = kernel.generator()?;
    let opts = StationaryOptions { mass: Some(f0.mass(&kernel.nu)), ..Default::default() };
    let mut boundary = kernel.boundary_field();
    if kernel.clamps.is_empty() {
        boundary = DensityField::constant(kernel.n_states, 0.0);
    }
    solve_stationary(&gen, nl, &boundary, None, opts)
}

/// Integrates the nonlinear scattering equation from `f0`. Clamped states
/// of `f0` are overwritten with the kernel's clamp values.
pub fn evolve_markov(
    kernel: &KernelSpec,
    nl: &Nonlinearity,
    f0: &DensityField,
    stepper: &TimeStepper,
    diagnostics: &[EntropySpec],
) -> std::result::Result<TrajectoryLog, EvolveFailure> {
    let fail = |e: Error| EvolveFailure { error: e, log: TrajectoryLog::new(Vec::new()) };
    let gen = kernel.generator().map_err(fail)?;
    let mut start = f0.clone();
    start.validate(kernel.n_states).map_err(fail)?;
    for &(s, v) in &kernel.clamps {
        start.values[s] = v;
    }
    evolve(&gen, nl, &start, stepper, diagnostics)
}

/// Discretized linear Boltzmann collision operator against a fixed
/// background on a one-dimensional velocity grid.
#[derive(Debug, Clone, Serialize)]
pub struct BoltzmannSpec {
    /// Increasing velocity grid.
    pub velocities: Vec<f64>,
    /// Background weights on the same grid (normalized internally).
    pub background: Vec<f64>,
    /// Overall collision frequency; rates are `rate * |v - w| * B(w)`.
    pub rate: f64,
    /// Restitution coefficient in `[0, 1]`. The post-collision velocity is
    /// `v + (1 + e)/2 (w - v)`, so `e = 1` exchanges `v` and `w`.
    pub restitution: f64,
}

/// Builds the kernel of a linear Boltzmann model. The reference measure is
/// the velocity cell width.
pub fn scattering_example_linear_boltzmann(spec: &BoltzmannSpec) -> Result<KernelSpec> {
    let v = &spec.velocities;
    let n = v.len();
    if n < 2 || spec.background.len() != n {
        return Err(Error::InvalidKernel("velocity grid and background must have equal length >= 2".into()));
    }
    if v.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidKernel("velocity grid must be increasing".into()));
    }
    if !(0.0..=1.0).contains(&spec.restitution) || !(spec.rate >= 0.0 && spec.rate.is_finite()) {
        return Err(Error::InvalidKernel("restitution must lie in [0, 1] and rate be nonnegative".into()));
    }
    let total: f64 = spec.background.iter().sum();
    if !(total > 0.0) || spec.background.iter().any(|b| !(*b >= 0.0)) {
        return Err(Error::InvalidKernel("background must be nonnegative with positive mass".into()));
    }
    let b: Vec<f64> = spec.background.iter().map(|x| x / total).collect();
    let nu: Vec<f64> = (0..n)
        .map(|i| {
            let lo = if i == 0 { v[0] } else { 0.5 * (v[i - 1] + v[i]) };
            let hi = if i == n - 1 { v[n - 1] } else { 0.5 * (v[i] + v[i + 1]) };
            let w = hi - lo;
            if w > 0.0 { w } else { v[1] - v[0] }
        })
        .collect();
    let alpha = 0.5 * (1.0 + spec.restitution);
    let mut rates = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j || b[j] == 0.0 {
                continue;
            }
            let k = spec.rate * (v[i] - v[j]).abs() * b[j];
            if k == 0.0 {
                continue;
            }
            let vp = v[i] + alpha * (v[j] - v[i]);
            // Linear interpolation of the post-collision velocity onto the grid.
            let pos = v.partition_point(|&x| x <= vp).clamp(1, n - 1);
            let (l, r) = (pos - 1, pos);
            let t = ((vp - v[l]) / (v[r] - v[l])).clamp(0.0, 1.0);
            if 1.0 - t > 0.0 && l != i {
                rates.push((i, l, k * (1.0 - t)));
            }
            if t > 0.0 && r != i {
                rates.push((i, r, k * t));
            }
        }
    }
    KernelSpec::new(nu, rates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::production_n_jump;
    use crate::model::ConvexGenerator;

    fn three_cycle() -> KernelSpec {
        let mut rates = Vec::new();
        for i in 0..3 {
            rates.push((i, (i + 1) % 3, 2.0));
            rates.push(((i + 1) % 3, i, 1.0));
        }
        KernelSpec::new(vec![1.0; 3], rates).unwrap()
    }

    #[test]
    fn classification_examples() {
        let c = classify(&[1.0; 3], &three_cycle()).unwrap();
        assert!(c.stationary && !c.reversible);
        let two = KernelSpec::new(vec![1.0, 1.0], vec![(0, 1, 1.0), (1, 0, 2.0)]).unwrap();
        let c = classify(&[2.0 / 3.0, 1.0 / 3.0], &two).unwrap();
        assert!(c.stationary && c.reversible);
        let sym = KernelSpec::new(vec![1.0; 3], vec![(0, 1, 1.0), (1, 0, 1.0), (1, 2, 3.0), (2, 1, 3.0)]).unwrap();
        let c = classify(&[1.0; 3], &sym).unwrap();
        assert!(c.stationary && c.reversible);
    }

    #[test]
    fn n_production_refused_on_cycle() {
        let k = three_cycle();
        let gen = k.generator().unwrap();
        let f = DensityField::new(vec![1.2, 0.9, 0.9]);
        let fi = DensityField::constant(3, 1.0);
        let r = production_n_jump(&f, &fi, &Nonlinearity::identity(), &ConvexGenerator::psi_quad(), &gen);
        assert!(matches!(r, Err(Error::NotReversible { .. })));
    }

    #[test]
    fn coo_parsing() {
        let k = KernelSpec::parse_coo("# cycle\n0 1 2\n1 2 2\n2 0 2.0\n", vec![1.0; 3]).unwrap();
        assert_eq!(k.rates.len(), 3);
        assert!(KernelSpec::parse_coo("0 1\n", vec![1.0; 2]).is_err());
        assert!(KernelSpec::parse_coo("0 5 1\n", vec![1.0; 2]).is_err());
    }

    #[test]
    fn doubly_stochastic_converges_to_uniform() {
        let k = three_cycle();
        let f0 = DensityField::new(vec![3.0, 0.0, 0.5]);
        let log = evolve_markov(&k, &Nonlinearity::identity(), &f0, &TimeStepper::implicit(0.05, 20.0), &[]).unwrap();
        let mass = log.column("mass").unwrap();
        for m in &mass {
            assert!((m - 3.5).abs() < 1e-12);
        }
        for v in &log.final_state.values {
            assert!((v - 3.5 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn squared_two_state_balance() {
        let k = KernelSpec::new(vec![1.0, 1.0], vec![(0, 1, 1.0), (1, 0, 2.0)]).unwrap();
        let nl = Nonlinearity::power(2.0).unwrap();
        let f0 = DensityField::new(vec![0.3, 1.7]);
        let log = evolve_markov(&k, &nl, &f0, &TimeStepper::implicit(0.01, 30.0).stride(100), &[]).unwrap();
        let w: Vec<f64> = log.final_state.values.iter().map(|f| f * f).collect();
        assert!(classify(&w, &k).unwrap().stationary);
        assert!((w[0] / w[1] - 2.0).abs() < 1e-9);
    }

    fn gaussian_grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn boltzmann_reversibility() {
        let v = gaussian_grid(21);
        let maxwell: Vec<f64> = v.iter().map(|x| (-x * x / 2.0).exp()).collect();
        let spec = BoltzmannSpec { velocities: v.clone(), background: maxwell, rate: 1.0, restitution: 1.0 };
        let k = scattering_example_linear_boltzmann(&spec).unwrap();
        let s = markov_stationary(&k, &Nonlinearity::identity(), &DensityField::constant(21, 1.0)).unwrap();
        let w: Vec<f64> = s.f_inf.values.iter().zip(&k.nu).map(|(a, b)| a * b).collect();
        let c = classify(&w, &k).unwrap();
        assert!(c.stationary && c.reversible);

        let skew: Vec<f64> = v.iter().map(|x| (-(x - 1.0) * (x - 1.0)).exp() + 0.3 * (-(x + 1.5).powi(2) * 4.0).exp()).collect();
        let spec = BoltzmannSpec { velocities: v, background: skew, rate: 1.0, restitution: 0.5 };
        let k = scattering_example_linear_boltzmann(&spec).unwrap();
        let s = markov_stationary(&k, &Nonlinearity::identity(), &DensityField::constant(21, 1.0)).unwrap();
        let w: Vec<f64> = s.f_inf.values.iter().zip(&k.nu).map(|(a, b)| a * b).collect();
        let c = classify(&w, &k).unwrap();
        assert!(c.stationary && !c.reversible);
    }

    #[test]
    fn zero_rate_is_identity() {
        let v = gaussian_grid(7);
        let spec = BoltzmannSpec { velocities: v, background: vec![1.0; 7], rate: 0.0, restitution: 1.0 };
        let k = scattering_example_linear_boltzmann(&spec).unwrap();
        let f0 = DensityField::new(vec![1.0, 2.0, 0.5, 0.1, 3.0, 1.0, 0.2]);
        let gen = k.generator().unwrap();
        let log = evolve_markov(&k, &Nonlinearity::identity(), &f0, &TimeStepper::implicit(0.1, 1.0), &[]).unwrap();
        assert_eq!(gen.pairs().len(), 0);
        for (a, b) in log.final_state.values.iter().zip(&f0.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
