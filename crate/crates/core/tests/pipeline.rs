//! End-to-end runs of the deterministic solvers against closed-form
//! discrete solutions.

use std::f64::consts::PI;

use relent_core::entropy::{h_phi, n_psi};
use relent_core::evolve::{evolve, EntropySpec, TimeStepper};
use relent_core::markov::{evolve_markov, KernelSpec};
use relent_core::systems::{relax_pair, PairField, SpeciesPair};
use relent_core::{
    assemble_from_grid, make_uniform_grid, solve_stationary, BoundaryCondition, ConvexGenerator, DensityField,
    DiffusionSpec, FieldSpec, Grid, Nonlinearity, StationaryOptions,
};

fn line(n: usize) -> Grid {
    make_uniform_grid(1, n, FieldSpec::Zero, DiffusionSpec::Identity).unwrap()
}

fn clamped(grid: &Grid, left: f64, right: f64, interior: impl Fn(f64) -> f64) -> DensityField {
    DensityField::from_fn(grid, |x| {
        if x[0] == 0.0 {
            left
        } else if (x[0] - 1.0).abs() < 1e-12 {
            right
        } else {
            interior(x[0])
        }
    })
}

#[test]
fn heat_sine_mode_matches_implicit_euler_factor() {
    let n = 21;
    let grid = line(n);
    let gen = assemble_from_grid(&grid, BoundaryCondition::Dirichlet).unwrap();
    let eps = 1e-2;
    let f0 = clamped(&grid, 1.0, 1.0, |x| 1.0 + eps * (PI * x).sin());
    let (dt, steps) = (1e-3, 100);
    let log = evolve(&gen, &Nonlinearity::identity(), &f0, &TimeStepper::implicit(dt, dt * steps as f64), &[]).unwrap();
    let h = 1.0 / (n - 1) as f64;
    let lambda_h = 4.0 / (h * h) * (PI * h / 2.0).sin().powi(2);
    let factor = (1.0 + dt * lambda_h).powi(-steps);
    for (c, v) in grid.centers().iter().zip(&log.final_state.values) {
        let exact = 1.0 + eps * (PI * c[0]).sin() * factor;
        assert!((v - exact).abs() < 1e-11, "x = {}: {v} vs {exact}", c[0]);
    }
}

#[test]
fn pme_stationary_profile_is_harmonic_in_sigma() {
    let grid = line(41);
    let gen = assemble_from_grid(&grid, BoundaryCondition::Dirichlet).unwrap();
    for m in [1.0, 2.0, 3.0, 4.5] {
        let nl = Nonlinearity::power(m).unwrap();
        let s = solve_stationary(&gen, &nl, &clamped(&grid, 1.0, 2.0, |_| 1.0), None, StationaryOptions::default()).unwrap();
        for (c, v) in grid.centers().iter().zip(&s.f_inf.values) {
            let exact = (1.0 + c[0] * (2f64.powf(m) - 1.0)).powf(1.0 / m);
            assert!((v - exact).abs() < 1e-10, "m = {m}, x = {}: {v} vs {exact}", c[0]);
        }
    }
}

#[test]
fn entropies_vanish_at_the_stationary_state_and_decay_toward_it() {
    let grid = line(31);
    let gen = assemble_from_grid(&grid, BoundaryCondition::Dirichlet).unwrap();
    let nl = Nonlinearity::power(2.0).unwrap();
    let f0 = clamped(&grid, 1.0, 2.0, |x| 0.5 + 3.0 * x * (1.0 - x));
    let specs = [EntropySpec::new(ConvexGenerator::phi_log()), EntropySpec::new(ConvexGenerator::psi_quad())];
    let log = evolve(&gen, &nl, &f0, &TimeStepper::implicit(1e-3, 1.0), &specs).unwrap();
    let fi = log.reference.clone().unwrap();
    let nu = grid.nu();
    assert_eq!(h_phi(&fi, &fi, &nl, &ConvexGenerator::phi_log(), &nu).unwrap(), 0.0);
    for col in ["H_phi", "N_psi"] {
        let v = log.column(col).unwrap();
        assert!(v[0] > 0.0 && *v.last().unwrap() < 1e-12 * v[0], "{col}: {} -> {}", v[0], v.last().unwrap());
    }
    let end = n_psi(&log.final_state, &fi, &nl, &ConvexGenerator::psi_quad(), &nu).unwrap();
    assert!((end - log.column("N_psi").unwrap().last().unwrap()).abs() <= 1e-12 * (1.0 + end));
}

#[test]
fn repeated_runs_are_identical() {
    let grid = make_uniform_grid(2, 9, FieldSpec::Constant([1.0, -0.5]), DiffusionSpec::Identity).unwrap();
    let gen = assemble_from_grid(&grid, BoundaryCondition::Dirichlet).unwrap();
    let nl = Nonlinearity::power(2.0).unwrap();
    let f0 = DensityField::from_fn(&grid, |x| 1.0 + x[0] + 0.3 * (3.0 * x[1]).sin());
    let specs = [EntropySpec::new(ConvexGenerator::phi_quad())];
    let stepper = TimeStepper::implicit(1e-3, 0.05);
    let a = evolve(&gen, &nl, &f0, &stepper, &specs).unwrap();
    let b = evolve(&gen, &nl, &f0, &stepper, &specs).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.final_state.values, b.final_state.values);
}

#[test]
fn closed_kernel_conserves_mass() {
    let nu = vec![0.5, 1.0, 2.0];
    let rates = vec![(0, 1, 3.0), (1, 2, 1.0), (2, 0, 0.5), (1, 0, 0.2)];
    let kernel = KernelSpec::new(nu.clone(), rates).unwrap();
    let nl = Nonlinearity::power(3.0).unwrap();
    let f0 = DensityField::new(vec![2.0, 0.1, 0.7]);
    let log = evolve_markov(&kernel, &nl, &f0, &TimeStepper::implicit(1e-2, 5.0), &[]).unwrap();
    let (m0, m1) = (f0.mass(&nu), log.final_state.mass(&nu));
    assert!((m0 - m1).abs() < 1e-12 * m0, "{m0} vs {m1}");
}

#[test]
fn decoupled_pair_relaxes_to_linear_profiles() {
    let grid = line(17);
    let gen = assemble_from_grid(&grid, BoundaryCondition::Dirichlet).unwrap();
    let f1 = clamped(&grid, 1.0, 3.0, |_| 0.2);
    let f2 = clamped(&grid, 2.0, 0.5, |_| 4.0);
    let relaxed = relax_pair(&gen, &SpeciesPair::decoupled_identity(), &PairField::new(f1, f2).unwrap()).unwrap();
    for (x, c) in grid.centers().iter().enumerate() {
        let [a, b] = relaxed.at(x);
        assert!((a - (1.0 + 2.0 * c[0])).abs() < 1e-9 && (b - (2.0 - 1.5 * c[0])).abs() < 1e-9);
    }
}
