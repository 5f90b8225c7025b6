//! Discrete Markov generators, assembled from a grid or given as raw rates.
//!
//! A generator acts on densities `u` relative to the reference measure `nu`:
//!
//! ```text
//! (L u)_x = (1 / nu_x) [ sum_y K(y, x) nu_y u_y - u_x nu_x sum_y K(x, y) ]
//! ```
//!
//! Grid generators discretize `div(A grad u + E u)` with a two-point flux per
//! face. The drift part is upwinded by default, which keeps all rates
//! nonnegative for any field strength.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::BandMatrix;
use crate::model::{CellKind, Grid};

/// Treatment of the boundary nodes of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    /// Boundary nodes are clamped to prescribed values.
    Dirichlet,
    /// Boundary nodes are free half cells with no outward faces.
    Neumann,
}

/// Discretization of the drift term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DriftScheme {
    Upwind,
    /// Central differences; rejected when `|E| h / A` exceeds `max_peclet`.
    Centered { max_peclet: f64 },
}

impl Default for DriftScheme {
    fn default() -> Self {
        DriftScheme::Upwind
    }
}

/// Unordered pair of states joined by at least one positive rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub k_ab: f64,
    pub k_ba: f64,
    /// Face area for grid generators, 1 for abstract kernels.
    pub area: f64,
}

#[derive(Debug, Clone)]
pub struct DiscreteGenerator {
    nu: Vec<f64>,
    clamped: Vec<bool>,
    out_ptr: Vec<usize>,
    out_col: Vec<usize>,
    out_rate: Vec<f64>,
    pairs: Vec<Pair>,
    free: Vec<usize>,
    free_index: Vec<Option<usize>>,
    free_bandwidth: usize,
}

/// Assembles the generator of a grid with the upwind drift scheme.
pub fn assemble_from_grid(grid: &Grid, bc: BoundaryCondition) -> Result<DiscreteGenerator> {
    assemble_with_scheme(grid, bc, DriftScheme::Upwind)
}

pub fn assemble_with_scheme(grid: &Grid, bc: BoundaryCondition, scheme: DriftScheme) -> Result<DiscreteGenerator> {
    let mut rates = Vec::with_capacity(2 * grid.faces.len());
    let mut areas = HashMap::with_capacity(grid.faces.len());
    for f in &grid.faces {
        let cond = f.diffusion * f.area / f.spacing;
        let (flow_ab, flow_ba) = match scheme {
            DriftScheme::Upwind => (
                cond + f.area * (-f.drift).max(0.0),
                cond + f.area * f.drift.max(0.0),
            ),
            DriftScheme::Centered { max_peclet } => {
                let peclet = if f.drift == 0.0 {
                    0.0
                } else if f.diffusion > 0.0 {
                    f.drift.abs() * f.spacing / f.diffusion
                } else {
                    f64::INFINITY
                };
                if peclet > max_peclet {
                    return Err(Error::PecletExceeded { peclet, bound: max_peclet });
                }
                (cond - 0.5 * f.area * f.drift, cond + 0.5 * f.area * f.drift)
            }
        };
        // Rates are flows per unit density; dividing by the cell volume
        // makes them independent of the reference weight.
        let (va, vb) = (grid.cells[f.a].volume, grid.cells[f.b].volume);
        rates.push((f.a, f.b, flow_ab.max(0.0) / va));
        rates.push((f.b, f.a, flow_ba.max(0.0) / vb));
        areas.insert((f.a.min(f.b), f.a.max(f.b)), f.area);
    }
    let clamped: Vec<bool> = grid
        .cells
        .iter()
        .map(|c| bc == BoundaryCondition::Dirichlet && c.kind != CellKind::Interior)
        .collect();
    let mut g = DiscreteGenerator::from_rates(grid.nu(), &rates, clamped)?;
    for p in &mut g.pairs {
        if let Some(a) = areas.get(&(p.a, p.b)) {
            p.area = *a;
        }
    }
    if g.free.is_empty() {
        return Err(Error::InvalidGrid("grid has no free cells".into()));
    }
    Ok(g)
}

impl DiscreteGenerator {
    /// Builds a generator from `(from, to, rate)` triples. Repeated pairs are
    /// summed and zero rates dropped.
    pub fn from_rates(nu: Vec<f64>, rates: &[(usize, usize, f64)], clamped: Vec<bool>) -> Result<Self> {
        let n = nu.len();
        if n == 0 {
            return Err(Error::InvalidKernel("no states".into()));
        }
        if clamped.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: clamped.len() });
        }
        if let Some((i, v)) = nu.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidKernel(format!("reference measure {v} at state {i} must be positive")));
        }
        let mut triples: Vec<(usize, usize, f64)> = Vec::with_capacity(rates.len());
        for &(x, y, k) in rates {
            if x >= n || y >= n {
                return Err(Error::InvalidKernel(format!("rate ({x}, {y}) out of range for {n} states")));
            }
            if !(k.is_finite() && k >= 0.0) {
                return Err(Error::InvalidKernel(format!("rate {k} for ({x}, {y}) must be finite and nonnegative")));
            }
            if x == y || k == 0.0 {
                continue;
            }
            triples.push((x, y, k));
        }
        triples.sort_by(|p, q| (p.0, p.1).cmp(&(q.0, q.1)));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(triples.len());
        for t in triples {
            match merged.last_mut() {
                Some(last) if last.0 == t.0 && last.1 == t.1 => last.2 += t.2,
                _ => merged.push(t),
            }
        }
        let mut out_ptr = vec![0usize; n + 1];
        for &(x, _, _) in &merged {
            out_ptr[x + 1] += 1;
        }
        for i in 0..n {
            out_ptr[i + 1] += out_ptr[i];
        }
        let out_col = merged.iter().map(|t| t.1).collect();
        let out_rate = merged.iter().map(|t| t.2).collect();

        let mut pairs: Vec<Pair> = Vec::new();
        {
            let mut keyed: Vec<((usize, usize), f64, f64)> = merged
                .iter()
                .map(|&(x, y, k)| if x < y { ((x, y), k, 0.0) } else { ((y, x), 0.0, k) })
                .collect();
            keyed.sort_by(|p, q| p.0.cmp(&q.0));
            for (key, kab, kba) in keyed {
                match pairs.last_mut() {
                    Some(p) if (p.a, p.b) == key => {
                        p.k_ab += kab;
                        p.k_ba += kba;
                    }
                    _ => pairs.push(Pair { a: key.0, b: key.1, k_ab: kab, k_ba: kba, area: 1.0 }),
                }
            }
        }

        let mut free = Vec::new();
        let mut free_index = vec![None; n];
        for i in 0..n {
            if !clamped[i] {
                free_index[i] = Some(free.len());
                free.push(i);
            }
        }
        let mut bw = 0;
        for p in &pairs {
            if let (Some(i), Some(j)) = (free_index[p.a], free_index[p.b]) {
                bw = bw.max(i.abs_diff(j));
            }
        }
        Ok(Self { nu, clamped, out_ptr, out_col, out_rate, pairs, free, free_index, free_bandwidth: bw })
    }

    pub fn n(&self) -> usize {
        self.nu.len()
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn clamped(&self) -> &[bool] {
        &self.clamped
    }

    pub fn is_clamped(&self, i: usize) -> bool {
        self.clamped[i]
    }

    pub fn has_clamped(&self) -> bool {
        self.clamped.iter().any(|&c| c)
    }

    pub fn free_states(&self) -> &[usize] {
        &self.free
    }

    pub fn free_index(&self, i: usize) -> Option<usize> {
        self.free_index[i]
    }

    /// Largest index distance between coupled free states.
    pub fn free_bandwidth(&self) -> usize {
        self.free_bandwidth
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    /// Outgoing `(target, rate)` pairs of state `x`.
    pub fn outgoing(&self, x: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.out_ptr[x]..self.out_ptr[x + 1];
        self.out_col[r.clone()].iter().copied().zip(self.out_rate[r].iter().copied())
    }

    pub fn rate(&self, x: usize, y: usize) -> f64 {
        self.outgoing(x).find(|&(t, _)| t == y).map_or(0.0, |(_, k)| k)
    }

    pub fn total_rate(&self, x: usize) -> f64 {
        self.outgoing(x).map(|(_, k)| k).sum()
    }

    /// Largest total jump rate over the free states.
    pub fn max_outflow(&self) -> f64 {
        self.free.iter().map(|&x| self.total_rate(x)).fold(0.0, f64::max)
    }

    /// Largest total jump rate over all states.
    pub fn max_rate(&self) -> f64 {
        (0..self.n()).map(|x| self.total_rate(x)).fold(0.0, f64::max)
    }

    /// Net measure flow into each state for the measure `w`.
    pub fn apply_measure(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for x in 0..self.n() {
            let wx = w[x];
            if wx == 0.0 {
                continue;
            }
            for (y, k) in self.outgoing(x) {
                let flow = k * wx;
                out[y] += flow;
                out[x] -= flow;
            }
        }
        out
    }

    /// Density rate `(1/nu) L(u nu)`. At clamped states the value is the net
    /// inflow those states absorb.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.n());
        let w: Vec<f64> = u.iter().zip(&self.nu).map(|(a, b)| a * b).collect();
        let mut out = self.apply_measure(&w);
        for (o, n) in out.iter_mut().zip(&self.nu) {
            *o /= n;
        }
        out
    }

    /// Largest `|L(u nu)|` over free states, in measure units.
    pub fn stationarity_residual(&self, u: &[f64]) -> f64 {
        let w: Vec<f64> = u.iter().zip(&self.nu).map(|(a, b)| a * b).collect();
        let r = self.apply_measure(&w);
        self.free.iter().map(|&x| r[x].abs()).fold(0.0, f64::max)
    }

    /// Scale against which stationarity residuals of `u` are judged.
    pub fn residual_scale(&self, u: &[f64]) -> f64 {
        (0..self.n()).map(|x| self.total_rate(x) * self.nu[x] * u[x].abs()).fold(0.0, f64::max)
    }

    /// Largest violation of `K(x,y) w_x = K(y,x) w_y` over pairs touching a
    /// free state, and the scale it should be compared with.
    pub fn detailed_balance_residual(&self, w: &[f64]) -> (f64, f64) {
        let mut res: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for p in &self.pairs {
            if self.clamped[p.a] && self.clamped[p.b] {
                continue;
            }
            let (fa, fb) = (p.k_ab * w[p.a], p.k_ba * w[p.b]);
            res = res.max((fa - fb).abs());
            scale = scale.max(fa.abs()).max(fb.abs());
        }
        (res, scale)
    }

    /// Whether `nu` itself satisfies detailed balance to `1e-12` relative.
    pub fn is_reversible(&self) -> bool {
        let (r, s) = self.detailed_balance_residual(&self.nu);
        r <= 1e-12 * s.max(f64::MIN_POSITIVE)
    }

    /// Empty band matrix sized for the free states.
    pub(crate) fn free_band(&self) -> BandMatrix {
        let bw = self.free_bandwidth;
        BandMatrix::zeros(self.free.len(), bw, bw)
    }

    /// Rate matrix as `row col rate` lines.
    pub fn to_coo(&self) -> String {
        let mut s = String::new();
        for x in 0..self.n() {
            for (y, k) in self.outgoing(x) {
                let _ = writeln!(s, "{x} {y} {k:.17e}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_uniform_grid, DiffusionSpec, FieldSpec, GridBuilder};
    use proptest::prelude::*;

    #[test]
    fn heat_example_structure() {
        let g = make_uniform_grid(1, 5, FieldSpec::Zero, DiffusionSpec::Identity).unwrap();
        let gen = assemble_from_grid(&g, BoundaryCondition::Dirichlet).unwrap();
        assert_eq!(gen.free_states(), &[1, 2, 3]);
        assert_eq!(gen.free_bandwidth(), 1);
        let h = 0.25;
        assert!((gen.total_rate(2) - 2.0 / (h * h)).abs() < 1e-12);
    }

    #[test]
    fn upwind_row_sums() {
        let e = 1.5;
        let g = make_uniform_grid(1, 11, FieldSpec::Constant([e, 0.0]), DiffusionSpec::Identity).unwrap();
        let gen = assemble_from_grid(&g, BoundaryCondition::Dirichlet).unwrap();
        let h = 0.1;
        assert!((gen.total_rate(5) - (2.0 / (h * h) + e / h)).abs() < 1e-9);
        // Positive E transports mass towards smaller x.
        assert!(gen.rate(5, 4) > gen.rate(5, 6));
    }

    #[test]
    fn consistent_with_continuum_operator() {
        // For u = x^2 with A = 1, E = 0: div(grad u) = 2 exactly on the grid.
        let g = make_uniform_grid(1, 21, FieldSpec::Zero, DiffusionSpec::Identity).unwrap();
        let gen = assemble_from_grid(&g, BoundaryCondition::Dirichlet).unwrap();
        let u: Vec<f64> = g.cells.iter().map(|c| c.center[0].powi(2)).collect();
        let r = gen.apply(&u);
        for &x in gen.free_states() {
            assert!((r[x] - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn centered_peclet_bound() {
        let g = make_uniform_grid(1, 11, FieldSpec::Constant([30.0, 0.0]), DiffusionSpec::Identity).unwrap();
        let scheme = DriftScheme::Centered { max_peclet: 2.0 };
        assert!(matches!(
            assemble_with_scheme(&g, BoundaryCondition::Dirichlet, scheme),
            Err(Error::PecletExceeded { .. })
        ));
        let g = make_uniform_grid(1, 11, FieldSpec::Constant([3.0, 0.0]), DiffusionSpec::Identity).unwrap();
        assert!(assemble_with_scheme(&g, BoundaryCondition::Dirichlet, scheme).is_ok());
    }

    #[test]
    fn neumann_conserves_mass() {
        let g = GridBuilder::new(2, 6).neumann(true).field(FieldSpec::Constant([0.7, -0.3])).build().unwrap();
        let gen = assemble_from_grid(&g, BoundaryCondition::Neumann).unwrap();
        assert!(!gen.has_clamped());
        let u: Vec<f64> = (0..gen.n()).map(|i| 1.0 + (i as f64 * 0.37).sin()).collect();
        let r = gen.apply(&u);
        let total: f64 = r.iter().zip(gen.nu()).map(|(a, b)| a * b).sum();
        assert!(total.abs() < 1e-10);
    }

    #[test]
    fn kernel_validation() {
        assert!(DiscreteGenerator::from_rates(vec![1.0, 1.0], &[(0, 1, -1.0)], vec![false; 2]).is_err());
        assert!(DiscreteGenerator::from_rates(vec![1.0, 1.0], &[(0, 2, 1.0)], vec![false; 2]).is_err());
        assert!(DiscreteGenerator::from_rates(vec![1.0, 0.0], &[(0, 1, 1.0)], vec![false; 2]).is_err());
        let g = DiscreteGenerator::from_rates(vec![1.0, 1.0], &[(0, 1, 1.0), (0, 1, 2.0)], vec![false; 2]).unwrap();
        assert_eq!(g.rate(0, 1), 3.0);
        assert_eq!(g.to_coo().lines().count(), 1);
    }

    proptest! {
        #[test]
        fn rates_nonnegative_and_conservative(e in -20.0f64..20.0, n in 4usize..30, a in 0.1f64..3.0) {
            let g = make_uniform_grid(1, n, FieldSpec::Constant([e, 0.0]), DiffusionSpec::Scalar(a)).unwrap();
            let gen = assemble_from_grid(&g, BoundaryCondition::Dirichlet).unwrap();
            for x in 0..gen.n() {
                for (_, k) in gen.outgoing(x) {
                    prop_assert!(k >= 0.0);
                }
            }
            // Total measure change equals zero when clamped states are counted.
            let u: Vec<f64> = (0..gen.n()).map(|i| 1.0 + i as f64).collect();
            let r = gen.apply(&u);
            let tot: f64 = r.iter().zip(gen.nu()).map(|(p, q)| p * q).sum();
            prop_assert!(tot.abs() < 1e-9 * gen.max_rate() * n as f64);
        }
    }
}
