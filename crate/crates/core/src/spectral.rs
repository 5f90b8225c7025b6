//! First Dirichlet eigenvalue, the elementary-inequality constant `C_K` and
//! exponential decay certificates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evolve::TrajectoryLog;
use crate::linalg::BandMatrix;
use crate::model::{CellKind, DensityField, Grid};

/// Smallest eigenvalue of the discrete Dirichlet Laplacian of the grid
/// (unit diffusion, no drift), by inverse iteration.
pub fn dirichlet_eigenvalue(grid: &Grid) -> Result<f64> {
    if grid.cells.iter().any(|c| c.kind == CellKind::NeumannBoundary) {
        return Err(Error::InvalidGrid("Dirichlet eigenvalue needs a Dirichlet grid".into()));
    }
    let mut index: Vec<Option<usize>> = vec![None; grid.len()];
    let mut count = 0;
    for (i, c) in grid.cells.iter().enumerate() {
        if c.kind == CellKind::Interior {
            index[i] = Some(count);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidGrid("no interior nodes".into()));
    }
    let bw = grid
        .faces
        .iter()
        .filter_map(|f| Some(index[f.a]?.abs_diff(index[f.b]?)))
        .max()
        .unwrap_or(0);
    let mut m = BandMatrix::zeros(count, bw, bw);
    for f in &grid.faces {
        let c = f.area / f.spacing;
        for (p, q) in [(f.a, f.b), (f.b, f.a)] {
            if let Some(i) = index[p] {
                let w = c / grid.cells[p].volume;
                m.add(i, i, w);
                if let Some(j) = index[q] {
                    m.add(i, j, -w);
                }
            }
        }
    }
    let lu = m.clone().factor()?;
    let mut x = vec![1.0; count];
    let mut lambda = 0.0;
    let max_iters = 5000;
    for _ in 0..max_iters {
        let y = lu.solve(&x);
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let xy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        // M y = x, so the Rayleigh quotient of y is (x . y) / (y . y).
        lambda = xy / yy;
        let ny = yy.sqrt();
        let res = x.iter().zip(&y).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt() / (lambda * ny);
        x = y.iter().map(|v| v / ny).collect();
        if res <= 1e-10 {
            return Ok(lambda);
        }
    }
    let _ = lambda;
    Err(Error::EigenNoConvergence(max_iters))
}

/// Ratio whose infimum defines `C_K`, written in `x = y / y_inf`.
pub fn ck_ratio(m: f64, y: f64, y_inf: f64) -> f64 {
    let scale = y_inf.powf(m - 1.0);
    let x = y / y_inf;
    let e = x - 1.0;
    if e == 0.0 {
        return 2.0 * m * scale;
    }
    let (num, den) = if e.abs() < 1e-3 {
        // Binomial series; the leading terms cancel in closed form.
        let binom = |a: f64, k: usize| (0..k).fold(1.0, |acc, j| acc * (a - j as f64) / (j + 1) as f64);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut ek = e;
        for k in 1..=8 {
            s1 += binom(m, k) * ek;
            if k >= 2 {
                s2 += binom(m + 1.0, k) * ek;
            }
            ek *= e;
        }
        (s1 * s1, s2)
    } else if x == 0.0 {
        (1.0, m)
    } else {
        let lx = e.ln_1p();
        let a = (m * lx).exp_m1();
        let b = ((m + 1.0) * lx).exp_m1() - (m + 1.0) * e;
        (a * a, b)
    };
    scale * (m + 1.0) * num / den
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..100 {
        if (b - a).abs() <= 1e-12 * (1.0 + a.abs() + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc < fd { (c, fc) } else { (d, fd) }
}

/// Best constant `C_K` in
/// `(y^m - y_inf^m)^2 >= C_K ((y^{m+1} - y_inf^{m+1})/(m+1) - (y - y_inf) y_inf^m)`
/// over `y >= 0` and `y_inf` in `[k_min, k_max]`.
///
/// Computed by a grid search over `y in [0, 10 k_max (m+1)]` (2000 points)
/// on a grid of `y_inf`, golden-section refinement of the three best
/// candidates, and the diagonal limit `2 m y_inf^{m-1}`. For `m > 1` the
/// ratio grows at infinity; for `m = 1` it is identically 2.
pub fn elementary_constant_ck(m: f64, k_min: f64, k_max: f64) -> Result<f64> {
    if !(m >= 1.0 && m.is_finite()) {
        return Err(Error::InvalidArgument(format!("exponent m = {m} must be at least 1")));
    }
    if !(k_min > 0.0 && k_max >= k_min && k_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid range [{k_min}, {k_max}]")));
    }
    if m == 1.0 {
        return Ok(2.0);
    }
    let y_cap = 10.0 * k_max * (m + 1.0);
    let ny = 2000;
    let nk = if k_max > k_min { 41 } else { 1 };
    let kgrid: Vec<f64> = (0..nk)
        .map(|i| if nk == 1 { k_min } else { k_min + (k_max - k_min) * i as f64 / (nk - 1) as f64 })
        .collect();
    let ygrid: Vec<f64> = (0..ny).map(|j| y_cap * j as f64 / (ny - 1) as f64).collect();
    let mut best = f64::INFINITY;
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &k) in kgrid.iter().enumerate() {
        best = best.min(2.0 * m * k.powf(m - 1.0));
        for (j, &y) in ygrid.iter().enumerate() {
            let r = ck_ratio(m, y, k);
            if r.is_finite() {
                cands.push((r, i, j));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    for &(r, i, j) in cands.iter().take(3) {
        best = best.min(r);
        let (mut k, mut y) = (kgrid[i], ygrid[j]);
        let klo = kgrid[i.saturating_sub(1)];
        let khi = kgrid[(i + 1).min(nk - 1)];
        let ylo = ygrid[j.saturating_sub(1)];
        let yhi = ygrid[(j + 1).min(ny - 1)];
        for _ in 0..3 {
            if yhi > ylo {
                let (yy, v) = golden_min(|t| ck_ratio(m, t, k), ylo, yhi);
                y = yy;
                best = best.min(v);
                best = best.min(ck_ratio(m, ylo, k)).min(ck_ratio(m, yhi, k));
            }
            if khi > klo {
                let (kk, v) = golden_min(|t| ck_ratio(m, y, t), klo, khi);
                k = kk;
                best = best.min(v);
            }
        }
    }
    Ok(best)
}

/// Predicted and observed exponential decay rates.
#[derive(Debug, Clone, Serialize)]
pub struct DecayCertificate {
    pub lambda_d: f64,
    pub c_k: f64,
    pub lambda: f64,
    pub fitted_rate: Option<f64>,
    pub margin: Option<f64>,
}

impl DecayCertificate {
    pub fn new(lambda_d: f64, c_k: f64) -> Self {
        Self { lambda_d, c_k, lambda: lambda_d * c_k, fitted_rate: None, margin: None }
    }

    pub fn with_fit(mut self, rate: f64) -> Self {
        self.fitted_rate = Some(rate);
        self.margin = Some(rate - self.lambda);
        self
    }

    /// Whether the fitted rate reaches `(1 - slack) lambda`.
    pub fn holds(&self, slack: f64) -> bool {
        self.fitted_rate.map_or(false, |r| r >= (1.0 - slack) * self.lambda)
    }
}

/// Certificate `lambda = lambda_D C_K` with `K = [min f_inf, max f_inf]`.
pub fn decay_rate(grid: &Grid, m: f64, f_inf: &DensityField) -> Result<DecayCertificate> {
    let (lo, hi) = (f_inf.min(), f_inf.max());
    if !(lo > 0.0) {
        return Err(Error::DegenerateReference { cell: 0, value: lo });
    }
    Ok(DecayCertificate::new(dirichlet_eigenvalue(grid)?, elementary_constant_ck(m, lo, hi)?))
}

/// Least-squares slope of `-ln(column)` over the latest half of the time
/// window `[t0, t1]`.
pub fn fit_rate(log: &TrajectoryLog, column: &str, window: (f64, f64)) -> Result<f64> {
    let values = log
        .column(column)
        .ok_or_else(|| Error::InvalidArgument(format!("no column named {column}")))?;
    let (t0, t1) = window;
    if !(t1 > t0) {
        return Err(Error::InvalidArgument(format!("empty window [{t0}, {t1}]")));
    }
    let start = t0 + 0.5 * (t1 - t0);
    let inside: Vec<(f64, f64)> = log
        .times
        .iter()
        .zip(&values)
        .filter(|(t, _)| **t >= start && **t <= t1)
        .map(|(t, v)| (*t, *v))
        .collect();
    if !inside.is_empty() && inside.iter().all(|(_, v)| *v == 0.0) {
        return Err(Error::FitUndefined("zero signal".into()));
    }
    let pts: Vec<(f64, f64)> = inside.into_iter().filter(|(_, v)| *v > 1e-280).map(|(t, v)| (t, -v.ln())).collect();
    if pts.len() < 10 {
        return Err(Error::FitUndefined(format!(
            "only {} usable points in the window; shrink it or log more often",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    Ok(sxy / sxx)
}
