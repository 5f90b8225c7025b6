//! Statistical checks of the particle simulators against exact laws.

use std::f64::consts::PI;

use relent_micro::gl::{simulate_gl, GlBoundary, GlModel, GlOptions, Potential};
use relent_micro::monitor::{lyapunov_monitor, run_replicas};
use relent_micro::{sample_product_measure, simulate_zrp, Configuration, MicroError, RateFn, Species, ZrpBoundary, ZrpModel, ZrpOptions};

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn single_walker_occupies_the_ring_uniformly() {
    let n = 8;
    let model = ZrpModel::new(n, 1, Species::One(RateFn::Linear), ZrpBoundary::Ring);
    let opts = ZrpOptions::new(20.0, 0.05).burn_in(1.0);
    let mut eta = vec![0; n];
    eta[3] = 1;
    let runs = run_replicas(24, 11, 0, |_, s| Ok(simulate_zrp(&model, &Configuration::single(eta.clone()), &opts, s)?.time_average))
        .unwrap();
    for i in 0..n {
        let (m, se) = mean_se(&runs.iter().map(|r| r[i]).collect::<Vec<_>>());
        assert!((m - 1.0 / n as f64).abs() <= 4.0 * se, "site {i}: {m} +- {se}");
    }
}

#[test]
fn independent_walkers_follow_the_discrete_heat_equation() {
    // For g(n) = n the mean profile solves d rho / dt = h^-2 Delta_h rho,
    // so the first Fourier mode decays at rate 4 h^-2 sin^2(pi / N).
    let n = 32;
    let model = ZrpModel::new(n, 1, Species::One(RateFn::Linear), ZrpBoundary::Ring);
    let x: Vec<f64> = model.positions().iter().map(|p| p[0]).collect();
    let profile: Vec<f64> = x.iter().map(|x| 20.0 + 10.0 * (2.0 * PI * x).sin()).collect();
    let t = 0.01;
    let opts = ZrpOptions::new(t, t);
    let amps = run_replicas(48, 12, 0, |_, s| {
        let eta0 = sample_product_measure(&RateFn::Linear, &profile, s ^ 0xabc)?;
        let run = simulate_zrp(&model, &Configuration::single(eta0), &opts, s)?;
        Ok(run.final_state.a.iter().zip(&x).map(|(&k, x)| k as f64 * (2.0 * PI * x).sin()).sum::<f64>() * 2.0 / n as f64)
    })
    .unwrap();
    let h = model.spacing();
    let exact = 10.0 * (-4.0 / (h * h) * (PI / n as f64).sin().powi(2) * t).exp();
    let (m, se) = mean_se(&amps);
    assert!((m - exact).abs() <= 4.0 * se, "amplitude {m} +- {se}, exact {exact}");
    assert!(exact < 7.0, "the test should see real decay ({exact})");
}

#[test]
fn periodic_gaussian_chain_has_the_conditioned_variance() {
    // Total mass is conserved, so the invariant law is N(1, 1) per site
    // conditioned on the sum: variance 1 - 1/N.
    let n = 16;
    let model = GlModel { n, potential: Potential::Quadratic, boundary: GlBoundary::Periodic, dt: 2e-3 };
    let opts = GlOptions::new(300.0, 0.5).burn_in(20.0);
    let runs = run_replicas(32, 13, 0, |_, s| {
        let r = simulate_gl(&model, &vec![1.0; n], &opts, s)?;
        // The mean is exactly 1; subtracting the replica's own time mean
        // would bias the estimate low.
        Ok(r.time_second_moment.iter().map(|s2| s2 - 1.0).sum::<f64>() / n as f64)
    })
    .unwrap();
    let (m, se) = mean_se(&runs);
    let exact = 1.0 - 1.0 / n as f64;
    // Euler-Maruyama shifts an Ornstein-Uhlenbeck variance by at most
    // a dt / 2 with a = 4 the top eigenvalue of the lattice Laplacian.
    assert!((m - exact).abs() <= 4.0 * se + 2.0 * model.dt * exact, "variance {m} +- {se}, exact {exact}");
}

#[test]
fn monitor_needs_two_replicas() {
    let model = ZrpModel::new(16, 1, Species::One(RateFn::Linear), ZrpBoundary::Reservoirs { left: 1.0, right: 2.0 });
    let run = simulate_zrp(&model, &Configuration::single(vec![1; 16]), &ZrpOptions::new(0.1, 0.01), 1).unwrap();
    let err = lyapunov_monitor(&[run.log], "F", (0.0, 0.1), 3.0).unwrap_err();
    assert!(matches!(err, MicroError::InsufficientReplicas { .. }));
}
