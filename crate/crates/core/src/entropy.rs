//! Relative entropy `H_Phi`, relative dual entropy `N_Psi` and their
//! production rates.
//!
//! Both functionals are sums over cells of one-dimensional integrals
//!
//! ```text
//! H = sum_x nu_x int_{f_inf}^{f} Phi'(sigma(s) / sigma(f_inf)) ds
//! N = sum_x nu_x int_{f_inf}^{f} Psi'(sigma(s) - sigma(f_inf)) ds
//! ```
//!
//! evaluated by adaptive Gauss-Kronrod quadrature in the deviation variable
//! `t = s - f_inf`. Power-law increments are computed without cancellation,
//! so tiny deviations keep full relative precision.
//!
//! Production rates come in two forms. The jump form is an exact identity
//! for any generator with a stationary reference. The gradient form
//! `-sum S_e (Phi'(h_b) - Phi'(h_a)) (h_b - h_a)` uses only the symmetric
//! part of the stationary flux; it is exact when `Phi` is quadratic or the
//! stationary flux vanishes, and otherwise differs by the antisymmetric
//! flux contribution.

use crate::error::{Error, Result};
use crate::generator::DiscreteGenerator;
use crate::model::{ConvexGenerator, DensityField, GeneratorKind, Nonlinearity};
use crate::quadrature::{integrate, QuadOptions};

/// Smallest admissible stationary value.
pub const REFERENCE_FLOOR: f64 = 1e-300;

fn cell_quad() -> QuadOptions {
    // The integrands do not change sign on [0, delta], so a purely relative
    // tolerance is meaningful.
    QuadOptions { abs_tol: 1e-300, rel_tol: 1e-13, max_intervals: 4000 }
}

fn check_lengths(n: usize, lens: &[usize]) -> Result<()> {
    for &l in lens {
        if l != n {
            return Err(Error::DimensionMismatch { expected: n, got: l });
        }
    }
    Ok(())
}

fn reference_values(f_inf: &[f64], nl: &Nonlinearity) -> Result<Vec<f64>> {
    f_inf
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !(v > REFERENCE_FLOOR) || !v.is_finite() {
                return Err(Error::DegenerateReference { cell: i, value: v });
            }
            let u = nl.value(v);
            if !(u > 0.0) {
                return Err(Error::DegenerateReference { cell: i, value: v });
            }
            Ok(u)
        })
        .collect()
}

fn deviations(f: &DensityField, f_inf: &DensityField) -> Result<Vec<f64>> {
    check_lengths(f_inf.len(), &[f.len()])?;
    f.validate(f.len())?;
    Ok(f.values.iter().zip(&f_inf.values).map(|(a, b)| a - b).collect())
}

fn require_kind(g: &ConvexGenerator, kind: GeneratorKind) -> Result<()> {
    if g.kind() != kind {
        return Err(Error::InvalidGenerator(format!("{} used where a {kind:?} generator is required", g.name())));
    }
    Ok(())
}

/// `H_Phi(f | f_inf)`.
pub fn h_phi(f: &DensityField, f_inf: &DensityField, nl: &Nonlinearity, phi: &ConvexGenerator, nu: &[f64]) -> Result<f64> {
    let d = deviations(f, f_inf)?;
    h_phi_deviation(&d, &f_inf.values, nl, phi, nu)
}

/// `H_Phi` with the state given as deviations `f - f_inf`.
pub fn h_phi_deviation(delta: &[f64], f_inf: &[f64], nl: &Nonlinearity, phi: &ConvexGenerator, nu: &[f64]) -> Result<f64> {
    require_kind(phi, GeneratorKind::Phi)?;
    check_lengths(f_inf.len(), &[delta.len(), nu.len()])?;
    let u_inf = reference_values(f_inf, nl)?;
    let mut total = 0.0;
    for x in 0..delta.len() {
        let (d, base, ub) = (delta[x], f_inf[x], u_inf[x]);
        if d == 0.0 {
            continue;
        }
        if base + d < 0.0 {
            return Err(Error::InvalidDensity(format!("negative density at cell {x}")));
        }
        let v = integrate(|t| phi.deriv1_shifted(nl.increment(base, t) / ub), 0.0, d, cell_quad())?;
        total += nu[x] * v;
    }
    Ok(total)
}

/// `N_Psi(f | f_inf)`.
pub fn n_psi(f: &DensityField, f_inf: &DensityField, nl: &Nonlinearity, psi: &ConvexGenerator, nu: &[f64]) -> Result<f64> {
    let d = deviations(f, f_inf)?;
    n_psi_deviation(&d, &f_inf.values, nl, psi, nu)
}

/// `N_Psi` with the state given as deviations `f - f_inf`.
pub fn n_psi_deviation(delta: &[f64], f_inf: &[f64], nl: &Nonlinearity, psi: &ConvexGenerator, nu: &[f64]) -> Result<f64> {
    require_kind(psi, GeneratorKind::Psi)?;
    check_lengths(f_inf.len(), &[delta.len(), nu.len()])?;
    reference_values(f_inf, nl)?;
    let mut total = 0.0;
    for x in 0..delta.len() {
        let (d, base) = (delta[x], f_inf[x]);
        if d == 0.0 {
            continue;
        }
        if base + d < 0.0 {
            return Err(Error::InvalidDensity(format!("negative density at cell {x}")));
        }
        let v = integrate(|t| psi.deriv1(nl.increment(base, t)), 0.0, d, cell_quad())?;
        total += nu[x] * v;
    }
    Ok(total)
}

/// Stationary pair fluxes `J_xy = K(x,y) nu_x sigma(f_inf)_x` after checking
/// stationarity of the reference.
fn stationary_fluxes(gen: &DiscreteGenerator, u_inf: &[f64]) -> Result<()> {
    let res = gen.stationarity_residual(u_inf);
    let umax = u_inf.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-11 * gen.max_rate() * umax;
    if res > tol {
        return Err(Error::NotStationary { residual: res, tolerance: tol });
    }
    Ok(())
}

/// Relative ratio `h - 1 = (sigma(f) - sigma(f_inf)) / sigma(f_inf)` per cell.
fn shifted_ratios(delta: &[f64], f_inf: &[f64], u_inf: &[f64], nl: &Nonlinearity) -> Vec<f64> {
    (0..delta.len()).map(|x| nl.increment(f_inf[x], delta[x]) / u_inf[x]).collect()
}

fn production_setup(
    f: &DensityField,
    f_inf: &DensityField,
    nl: &Nonlinearity,
    gen: &DiscreteGenerator,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(gen.n(), &[f.len(), f_inf.len()])?;
    let d = deviations(f, f_inf)?;
    let u_inf = reference_values(&f_inf.values, nl)?;
    Ok((d, u_inf))
}

/// Gradient form of `dH/dt`, built from the symmetric part of the stationary
/// flux on each pair.
pub fn production_h_pde(
    f: &DensityField,
    f_inf: &DensityField,
    nl: &Nonlinearity,
    phi: &ConvexGenerator,
    gen: &DiscreteGenerator,
) -> Result<f64> {
    require_kind(phi, GeneratorKind::Phi)?;
    let (d, u_inf) = production_setup(f, f_inf, nl, gen)?;
    Ok(production_h_pde_deviation(&d, &f_inf.values, &u_inf, nl, phi, gen))
}

pub(crate) fn production_h_pde_deviation(
    d: &[f64],
    f_inf: &[f64],
    u_inf: &[f64],
    nl: &Nonlinearity,
    phi: &ConvexGenerator,
    gen: &DiscreteGenerator,
) -> f64 {
    let w = shifted_ratios(d, f_inf, u_inf, nl);
    let nu = gen.nu();
    let mut p = 0.0;
    for e in gen.pairs() {
        let s = 0.5 * (e.k_ab * nu[e.a] * u_inf[e.a] + e.k_ba * nu[e.b] * u_inf[e.b]);
        let dphi = phi.deriv1_shifted(w[e.b]) - phi.deriv1_shifted(w[e.a]);
        p -= s * dphi * (w[e.b] - w[e.a]);
    }
    p
}

/// Jump form of `dH/dt`: `-sum_{x,y} J_xy D_Phi(h_x, h_y)` with the Bregman
/// divergence `D_Phi`. Requires a stationary reference.
pub fn production_h_jump(
    f: &DensityField,
    f_inf: &DensityField,
    nl: &Nonlinearity,
    phi: &ConvexGenerator,
    gen: &DiscreteGenerator,
) -> Result<f64> {
    require_kind(phi, GeneratorKind::Phi)?;
    let (d, u_inf) = production_setup(f, f_inf, nl, gen)?;
    stationary_fluxes(gen, &u_inf)?;
    Ok(production_h_jump_deviation(&d, &f_inf.values, &u_inf, nl, phi, gen))
}

pub(crate) fn production_h_jump_deviation(
    d: &[f64],
    f_inf: &[f64],
    u_inf: &[f64],
    nl: &Nonlinearity,
    phi: &ConvexGenerator,
    gen: &DiscreteGenerator,
) -> f64 {
    let w = shifted_ratios(d, f_inf, u_inf, nl);
    let nu = gen.nu();
    let mut p = 0.0;
    for x in 0..gen.n() {
        let jx = nu[x] * u_inf[x];
        for (y, k) in gen.outgoing(x) {
            p -= k * jx * phi.bregman_shifted(w[x], w[y]);
        }
    }
    p
}

fn require_reversible(gen: &DiscreteGenerator) -> Result<()> {
    let (r, s) = gen.detailed_balance_residual(gen.nu());
    let tol = 1e-12 * s;
    if r > tol {
        return Err(Error::NotReversible { residual: r, tolerance: tol });
    }
    Ok(())
}

/// Gradient form of `dN/dt`: `-sum_e c_e (Psi'(g_b) - Psi'(g_a)) (g_b - g_a)`
/// with `g = sigma(f) - sigma(f_inf)` and symmetric conductances `c_e`.
/// Requires `nu` to be reversible for the generator.
pub fn production_n_pde(
    f: &DensityField,
    f_inf: &DensityField,
    nl: &Nonlinearity,
    psi: &ConvexGenerator,
    gen: &DiscreteGenerator,
) -> Result<f64> {
    require_kind(psi, GeneratorKind::Psi)?;
    let (d, _) = production_setup(f, f_inf, nl, gen)?;
    require_reversible(gen)?;
    Ok(production_n_pde_deviation(&d, &f_inf.values, nl, psi, gen))
}

pub(crate) fn production_n_pde_deviation(
    d: &[f64],
    f_inf: &[f64],
    nl: &Nonlinearity,
    psi: &ConvexGenerator,
    gen: &DiscreteGenerator,
) -> f64 {
    let g: Vec<f64> = (0..d.len()).map(|x| nl.increment(f_inf[x], d[x])).collect();
    let nu = gen.nu();
    let mut p = 0.0;
    for e in gen.pairs() {
        let c = 0.5 * (e.k_ab * nu[e.a] + e.k_ba * nu[e.b]);
        p -= c * (psi.deriv1(g[e.b]) - psi.deriv1(g[e.a])) * (g[e.b] - g[e.a]);
    }
    p
}

/// Jump form of `dN/dt`: `-sum_{x,y} K(x,y) nu_x D_Psi(g_x, g_y)`.
/// Requires `nu` to be reversible for the generator.
pub fn production_n_jump(
    f: &DensityField,
    f_inf: &DensityField,
    nl: &Nonlinearity,
    psi: &ConvexGenerator,
    gen: &DiscreteGenerator,
) -> Result<f64> {
    require_kind(psi, GeneratorKind::Psi)?;
    let (d, _) = production_setup(f, f_inf, nl, gen)?;
    require_reversible(gen)?;
    Ok(production_n_jump_deviation(&d, &f_inf.values, nl, psi, gen))
}

pub(crate) fn production_n_jump_deviation(
    d: &[f64],
    f_inf: &[f64],
    nl: &Nonlinearity,
    psi: &ConvexGenerator,
    gen: &DiscreteGenerator,
) -> f64 {
    let g: Vec<f64> = (0..d.len()).map(|x| nl.increment(f_inf[x], d[x])).collect();
    let nu = gen.nu();
    let mut p = 0.0;
    for x in 0..gen.n() {
        for (y, k) in gen.outgoing(x) {
            p -= k * nu[x] * psi.bregman_shifted(g[x], g[y]);
        }
    }
    p
}

/// Local rate function `F(f | f_inf) = int_{f_inf}^{f} ln(sigma(s) / sigma(f_inf)) ds`.
pub fn ld_rate_f(f: f64, f_inf: f64, nl: &Nonlinearity) -> Result<f64> {
    if !(f >= 0.0 && f.is_finite()) {
        return Err(Error::InvalidDensity(format!("value {f}")));
    }
    if !(f_inf > REFERENCE_FLOOR) {
        return Err(Error::DegenerateReference { cell: 0, value: f_inf });
    }
    let ub = nl.value(f_inf);
    if !(ub > 0.0) {
        return Err(Error::DegenerateReference { cell: 0, value: f_inf });
    }
    let d = f - f_inf;
    if d == 0.0 {
        return Ok(0.0);
    }
    integrate(|t| (nl.increment(f_inf, t) / ub).ln_1p(), 0.0, d, cell_quad())
}

/// `sum_x nu_x F(f_x | f_inf_x)`.
pub fn ld_rate_f_profile(f: &DensityField, f_inf: &DensityField, nl: &Nonlinearity, nu: &[f64]) -> Result<f64> {
    check_lengths(f_inf.len(), &[f.len(), nu.len()])?;
    let mut total = 0.0;
    for x in 0..f.len() {
        total += nu[x] * ld_rate_f(f.values[x], f_inf.values[x], nl)?;
    }
    Ok(total)
}

/// Quadratic large-deviation functional
/// `G = sum_x nu_x int_{f_inf}^{f} (sigma(s) - sigma(f_inf)) ds`.
pub fn ld_functional_g(f: &DensityField, f_inf: &DensityField, nl: &Nonlinearity, nu: &[f64]) -> Result<f64> {
    check_lengths(f_inf.len(), &[f.len(), nu.len()])?;
    f.validate(f.len())?;
    let mut total = 0.0;
    for x in 0..f.len() {
        let (a, b) = (f_inf.values[x], f.values[x]);
        if a == b {
            continue;
        }
        let ua = nl.value(a);
        total += nu[x] * integrate(|s| nl.value(s) - ua, a, b, cell_quad())?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{assemble_from_grid, BoundaryCondition};
    use crate::model::{make_uniform_grid, DiffusionSpec, FieldSpec};
    use crate::stationary::{solve_stationary, StationaryOptions};
    use proptest::prelude::*;

    #[test]
    fn heat_closed_forms() {
        // sigma = id: H_log = sum nu (f ln(f/f_inf) - f + f_inf),
        // N_quad = sum nu (f - f_inf)^2 / 2.
        let nl = Nonlinearity::identity();
        let f = DensityField::new(vec![0.5, 1.3, 2.0]);
        let fi = DensityField::new(vec![1.0, 1.1, 1.7]);
        let nu = [0.2, 0.5, 0.3];
        let h = h_phi(&f, &fi, &nl, &ConvexGenerator::phi_log(), &nu).unwrap();
        let exact: f64 = (0..3)
            .map(|i| {
                let (a, b) = (f.values[i], fi.values[i]);
                nu[i] * (a * (a / b).ln() - a + b)
            })
            .sum();
        assert!((h - exact).abs() < 1e-14);
        let n = n_psi(&f, &fi, &nl, &ConvexGenerator::psi_quad(), &nu).unwrap();
        let exact: f64 = (0..3).map(|i| nu[i] * 0.5 * (f.values[i] - fi.values[i]).powi(2)).sum();
        assert!((n - exact).abs() < 1e-15);
    }

    #[test]
    fn porous_medium_closed_form() {
        // sigma = s^2, Phi_log: int ln(s^2 / b^2) ds.
        let nl = Nonlinearity::power(2.0).unwrap();
        let (a, b) = (0.3f64, 1.2f64);
        let exact = 2.0 * (a * a.ln() - a - (b * b.ln() - b)) - 2.0 * b.ln() * (a - b);
        let v = ld_rate_f(a, b, &nl).unwrap();
        assert!((v - exact).abs() < 1e-13);
        let h = h_phi(&DensityField::new(vec![a]), &DensityField::new(vec![b]), &nl, &ConvexGenerator::phi_log(), &[1.0])
            .unwrap();
        assert!((h - v).abs() < 1e-14);
    }

    #[test]
    fn tiny_deviations_keep_relative_precision() {
        let nl = Nonlinearity::power(3.0).unwrap();
        let (b, d) = (1.5, 1e-150);
        let h = h_phi_deviation(&[d], &[b], &nl, &ConvexGenerator::phi_log(), &[1.0]).unwrap();
        // Leading order: Phi''(1) (sigma'(b)/sigma(b)) d^2 / 2 = (3/b) d^2 / 2.
        let lead = 0.5 * (3.0 / b) * d * d;
        assert!((h / lead - 1.0).abs() < 1e-12, "{h} {lead}");
    }

    #[test]
    fn errors_for_degenerate_reference_and_wrong_kind() {
        let nl = Nonlinearity::identity();
        let f = DensityField::new(vec![1.0]);
        let z = DensityField::new(vec![0.0]);
        assert!(matches!(
            h_phi(&f, &z, &nl, &ConvexGenerator::phi_log(), &[1.0]),
            Err(Error::DegenerateReference { .. })
        ));
        assert!(h_phi(&f, &f, &nl, &ConvexGenerator::psi_quad(), &[1.0]).is_err());
    }

    fn boundary_driven(m: f64, left: f64, right: f64, e: f64) -> (DiscreteGenerator, Nonlinearity, DensityField) {
        let g = make_uniform_grid(1, 5, FieldSpec::Constant([e, 0.0]), DiffusionSpec::Identity).unwrap();
        let gen = assemble_from_grid(&g, BoundaryCondition::Dirichlet).unwrap();
        let nl = Nonlinearity::power(m).unwrap();
        let mut fb = vec![1.0; 5];
        fb[0] = left;
        fb[4] = right;
        let s = solve_stationary(&gen, &nl, &DensityField::new(fb), None, StationaryOptions::default()).unwrap();
        (gen, nl, s.f_inf)
    }

    fn rate(gen: &DiscreteGenerator, nl: &Nonlinearity, f: &DensityField) -> Vec<f64> {
        let u: Vec<f64> = f.values.iter().map(|&s| nl.value(s)).collect();
        let mut r = gen.apply(&u);
        for x in 0..gen.n() {
            if gen.is_clamped(x) {
                r[x] = 0.0;
            }
        }
        r
    }

    fn fd_derivative(
        gen: &DiscreteGenerator,
        nl: &Nonlinearity,
        f: &DensityField,
        func: &dyn Fn(&DensityField) -> f64,
    ) -> f64 {
        let dt = 1e-7;
        let r = rate(gen, nl, f);
        let plus = DensityField::new(f.values.iter().zip(&r).map(|(a, b)| a + dt * b).collect());
        let minus = DensityField::new(f.values.iter().zip(&r).map(|(a, b)| a - dt * b).collect());
        (func(&plus) - func(&minus)) / (2.0 * dt)
    }

    #[test]
    fn jump_form_matches_time_derivative_with_drift() {
        let (gen, nl, fi) = boundary_driven(2.0, 1.0, 2.0, 1.0);
        let f = DensityField::new(vec![1.0, 1.9, 0.6, 1.4, 2.0]);
        let phi = ConvexGenerator::phi_log();
        let p = production_h_jump(&f, &fi, &nl, &phi, &gen).unwrap();
        let fd = fd_derivative(&gen, &nl, &f, &|g| h_phi(g, &fi, &nl, &phi, gen.nu()).unwrap());
        assert!((p - fd).abs() <= 1e-6 * fd.abs());
        assert!(p < 0.0);
        // The gradient form misses the antisymmetric flux term here.
        let q = production_h_pde(&f, &fi, &nl, &phi, &gen).unwrap();
        assert!((q - p).abs() > 1e-8 * p.abs());
    }

    #[test]
    fn quadratic_phi_gradient_form_is_exact() {
        let (gen, nl, fi) = boundary_driven(2.0, 1.0, 2.0, 0.0);
        let f = DensityField::new(vec![1.0, 1.9, 0.6, 1.4, 2.0]);
        let phi = ConvexGenerator::phi_quad();
        let p = production_h_pde(&f, &fi, &nl, &phi, &gen).unwrap();
        let fd = fd_derivative(&gen, &nl, &f, &|g| h_phi(g, &fi, &nl, &phi, gen.nu()).unwrap());
        assert!((p - fd).abs() <= 1e-6 * fd.abs());
    }

    #[test]
    fn n_production_requires_reversibility() {
        let (gen, nl, fi) = boundary_driven(1.0, 1.0, 2.0, 3.0);
        let f = DensityField::new(vec![1.0, 1.2, 1.1, 1.5, 2.0]);
        assert!(matches!(
            production_n_pde(&f, &fi, &nl, &ConvexGenerator::psi_quad(), &gen),
            Err(Error::NotReversible { .. })
        ));
    }

    #[test]
    fn g_functional_equals_quadratic_dual_entropy() {
        let nl = Nonlinearity::power(2.5).unwrap();
        let f = DensityField::new(vec![0.2, 1.0, 3.1, 0.9]);
        let fi = DensityField::new(vec![1.0, 1.4, 2.2, 0.9]);
        let nu = [0.1, 0.4, 0.3, 0.2];
        let g = ld_functional_g(&f, &fi, &nl, &nu).unwrap();
        let n = n_psi(&f, &fi, &nl, &ConvexGenerator::psi_quad(), &nu).unwrap();
        assert!((g - n).abs() <= 1e-12 * g.abs());
    }

    proptest! {
        #[test]
        fn functionals_are_nonnegative(vals in proptest::collection::vec(0.0f64..4.0, 5), m in 1.0f64..3.0) {
            let (gen, nl, fi) = boundary_driven(m, 1.0, 2.0, 0.0);
            let mut v = vals.clone();
            v[0] = 1.0;
            v[4] = 2.0;
            let f = DensityField::new(v);
            let h = h_phi(&f, &fi, &nl, &ConvexGenerator::phi_log(), gen.nu()).unwrap();
            let n = n_psi(&f, &fi, &nl, &ConvexGenerator::psi_quad(), gen.nu()).unwrap();
            prop_assert!(h >= 0.0 && n >= 0.0);
            let p = production_n_pde(&f, &fi, &nl, &ConvexGenerator::psi_power(1.5).unwrap(), &gen).unwrap();
            prop_assert!(p <= 0.0);
            let q = production_h_jump(&f, &fi, &nl, &ConvexGenerator::phi_log(), &gen).unwrap();
            prop_assert!(q <= 1e-12);
        }

        #[test]
        fn n_forms_agree(vals in proptest::collection::vec(0.1f64..3.0, 5)) {
            let (gen, nl, fi) = boundary_driven(2.0, 1.0, 2.0, 0.0);
            let mut v = vals.clone();
            v[0] = 1.0;
            v[4] = 2.0;
            let f = DensityField::new(v);
            let psi = ConvexGenerator::psi_power(3.0).unwrap();
            let a = production_n_pde(&f, &fi, &nl, &psi, &gen).unwrap();
            let b = production_n_jump(&f, &fi, &nl, &psi, &gen).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300));
        }
    }
}
