//! Grid geometry, constitutive nonlinearities, convex generators and density
//! fields.
//!
//! The grid is vertex centered: `n` nodes per axis on `[0, L]^d` with spacing
//! `h = L / (n - 1)`. Each node owns the dual cell around it, so boundary
//! nodes carry half (or quarter) cells and the volumes sum to `L^d`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];
pub type VectorFieldFn = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;
pub type MatrixFieldFn = Arc<dyn Fn(Point) -> [[f64; 2]; 2] + Send + Sync>;
pub type ScalarFieldFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

/// Drift field `E` in the transport term `div(E f)`.
#[derive(Clone, Default)]
pub enum FieldSpec {
    #[default]
    Zero,
    Constant([f64; 2]),
    Function(VectorFieldFn),
}

impl FieldSpec {
    pub fn at(&self, x: Point) -> [f64; 2] {
        match self {
            FieldSpec::Zero => [0.0, 0.0],
            FieldSpec::Constant(e) => *e,
            FieldSpec::Function(f) => f(x),
        }
    }
}

impl fmt::Debug for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldSpec::Zero => write!(f, "Zero"),
            FieldSpec::Constant(e) => write!(f, "Constant({e:?})"),
            FieldSpec::Function(_) => write!(f, "Function(..)"),
        }
    }
}

/// Diffusion matrix `A(x)`. Must be symmetric positive semidefinite; in two
/// dimensions only diagonal matrices are supported.
#[derive(Clone, Default)]
pub enum DiffusionSpec {
    #[default]
    Identity,
    Scalar(f64),
    Matrix([[f64; 2]; 2]),
    Function(MatrixFieldFn),
}

impl DiffusionSpec {
    pub fn at(&self, x: Point) -> [[f64; 2]; 2] {
        match self {
            DiffusionSpec::Identity => [[1.0, 0.0], [0.0, 1.0]],
            DiffusionSpec::Scalar(a) => [[*a, 0.0], [0.0, *a]],
            DiffusionSpec::Matrix(m) => *m,
            DiffusionSpec::Function(f) => f(x),
        }
    }
}

impl fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffusionSpec::Identity => write!(f, "Identity"),
            DiffusionSpec::Scalar(a) => write!(f, "Scalar({a})"),
            DiffusionSpec::Matrix(m) => write!(f, "Matrix({m:?})"),
            DiffusionSpec::Function(_) => write!(f, "Function(..)"),
        }
    }
}

fn check_diffusion(dim: usize, a: [[f64; 2]; 2], x: Point) -> Result<()> {
    let bad = |msg: &str| Err(Error::InvalidDiffusion(format!("{msg} at {x:?}: {a:?}")));
    if a.iter().flatten().any(|v| !v.is_finite()) {
        return bad("non-finite entry");
    }
    if a[0][0] < 0.0 || (dim == 2 && a[1][1] < 0.0) {
        return bad("negative diagonal entry");
    }
    if dim == 2 {
        if (a[0][1] - a[1][0]).abs() > 1e-14 * (a[0][0] + a[1][1]).max(1.0) {
            return bad("matrix is not symmetric");
        }
        if a[0][1] != 0.0 {
            return bad("off-diagonal diffusion is not supported");
        }
    }
    Ok(())
}

/// Kind of a grid node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Interior,
    DirichletBoundary,
    NeumannBoundary,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub center: Point,
    pub volume: f64,
    /// Reference measure `nu = w(x) * volume`.
    pub nu: f64,
    pub kind: CellKind,
}

/// Face between node `a` and its neighbour `b = a + e_axis`.
#[derive(Debug, Clone)]
pub struct Face {
    pub a: usize,
    pub b: usize,
    pub axis: usize,
    pub area: f64,
    pub spacing: f64,
    /// Component of `E` along `e_axis` at the face midpoint.
    pub drift: f64,
    /// Normal diffusion coefficient `A[axis][axis]` at the face midpoint.
    pub diffusion: f64,
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub dim: usize,
    pub n: usize,
    pub length: f64,
    pub spacing: f64,
    pub cells: Vec<Cell>,
    pub faces: Vec<Face>,
}

/// Builder for uniform grids.
#[derive(Clone)]
pub struct GridBuilder {
    dim: usize,
    n: usize,
    length: f64,
    field: FieldSpec,
    diffusion: DiffusionSpec,
    boundary: CellKind,
    weight: Option<ScalarFieldFn>,
}

impl GridBuilder {
    pub fn new(dim: usize, n: usize) -> Self {
        Self {
            dim,
            n,
            length: 1.0,
            field: FieldSpec::Zero,
            diffusion: DiffusionSpec::Identity,
            boundary: CellKind::DirichletBoundary,
            weight: None,
        }
    }

    pub fn length(mut self, l: f64) -> Self {
        self.length = l;
        self
    }

    pub fn field(mut self, f: FieldSpec) -> Self {
        self.field = f;
        self
    }

    pub fn diffusion(mut self, a: DiffusionSpec) -> Self {
        self.diffusion = a;
        self
    }

    /// Marks boundary nodes as Dirichlet (default) or Neumann.
    pub fn neumann(mut self, yes: bool) -> Self {
        self.boundary = if yes { CellKind::NeumannBoundary } else { CellKind::DirichletBoundary };
        self
    }

    /// Density of the reference measure with respect to cell volume.
    pub fn weight(mut self, w: ScalarFieldFn) -> Self {
        self.weight = Some(w);
        self
    }

    pub fn build(self) -> Result<Grid> {
        let Self { dim, n, length, field, diffusion, boundary, weight } = self;
        if !(dim == 1 || dim == 2) {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if n < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 nodes per axis, got {n}")));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!("invalid domain length {length}")));
        }
        let h = length / (n - 1) as f64;
        let total = if dim == 1 { n } else { n * n };
        let extent = |i: usize| if i == 0 || i == n - 1 { 0.5 * h } else { h };
        let mut cells = Vec::with_capacity(total);
        for idx in 0..total {
            let (i, j) = (idx % n, idx / n);
            let center = if dim == 1 { [i as f64 * h, 0.0] } else { [i as f64 * h, j as f64 * h] };
            let volume = if dim == 1 { extent(i) } else { extent(i) * extent(j) };
            let on_boundary =
                i == 0 || i == n - 1 || (dim == 2 && (j == 0 || j == n - 1));
            let w = weight.as_ref().map_or(1.0, |w| w(center));
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidGrid(format!("reference weight {w} at {center:?} must be positive")));
            }
            cells.push(Cell {
                center,
                volume,
                nu: w * volume,
                kind: if on_boundary { boundary } else { CellKind::Interior },
            });
        }
        let mut faces = Vec::new();
        for idx in 0..total {
            let (i, j) = (idx % n, idx / n);
            for axis in 0..dim {
                let (ni, nj) = if axis == 0 { (i + 1, j) } else { (i, j + 1) };
                if ni >= n || nj >= n {
                    continue;
                }
                let b = ni + n * nj;
                let area = if dim == 1 {
                    1.0
                } else if axis == 0 {
                    extent(j)
                } else {
                    extent(i)
                };
                let (ca, cb) = (cells[idx].center, cells[b].center);
                let mid = [0.5 * (ca[0] + cb[0]), 0.5 * (ca[1] + cb[1])];
                let a = diffusion.at(mid);
                check_diffusion(dim, a, mid)?;
                let e = field.at(mid);
                if !(e[0].is_finite() && e[1].is_finite()) {
                    return Err(Error::InvalidGrid(format!("non-finite field at {mid:?}")));
                }
                faces.push(Face {
                    a: idx,
                    b,
                    axis,
                    area,
                    spacing: h,
                    drift: e[axis],
                    diffusion: a[axis][axis],
                });
            }
        }
        Ok(Grid { dim, n, length, spacing: h, cells, faces })
    }
}

/// Uniform grid on the unit cube with Dirichlet boundary nodes.
pub fn make_uniform_grid(dim: usize, n: usize, field: FieldSpec, diffusion: DiffusionSpec) -> Result<Grid> {
    GridBuilder::new(dim, n).field(field).diffusion(diffusion).build()
}

impl Grid {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn nu(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.nu).collect()
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.cells[i].kind != CellKind::Interior
    }

    pub fn interior_count(&self) -> usize {
        self.cells.iter().filter(|c| c.kind == CellKind::Interior).count()
    }

    pub fn centers(&self) -> Vec<Point> {
        self.cells.iter().map(|c| c.center).collect()
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone)]
struct MonotoneCubic {
    s: Vec<f64>,
    v: Vec<f64>,
    m: Vec<f64>,
}

impl MonotoneCubic {
    fn new(points: &[(f64, f64)]) -> Result<Self> {
        let mut pts = points.to_vec();
        if pts.first().map_or(true, |p| p.0 != 0.0) {
            pts.insert(0, (0.0, 0.0));
        }
        if pts.len() < 2 {
            return Err(Error::InvalidNonlinearity("table needs at least one positive point".into()));
        }
        if pts[0].1 != 0.0 {
            return Err(Error::InvalidNonlinearity("tabulated sigma must vanish at 0".into()));
        }
        for w in pts.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) || !w[1].0.is_finite() || !w[1].1.is_finite() {
                return Err(Error::InvalidNonlinearity(
                    "table must be strictly increasing in both columns".into(),
                ));
            }
        }
        let s: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let v: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let k = s.len();
        let h: Vec<f64> = (0..k - 1).map(|i| s[i + 1] - s[i]).collect();
        let d: Vec<f64> = (0..k - 1).map(|i| (v[i + 1] - v[i]) / h[i]).collect();
        let mut m = vec![0.0; k];
        m[0] = d[0];
        m[k - 1] = d[k - 2];
        for i in 1..k - 1 {
            // Weighted harmonic mean keeps the interpolant monotone.
            let (h0, h1) = (h[i - 1], h[i]);
            m[i] = 3.0 * (h0 + h1) / ((2.0 * h1 + h0) / d[i - 1] + (h1 + 2.0 * h0) / d[i]);
        }
        Ok(Self { s, v, m })
    }

    fn segment(&self, x: f64) -> usize {
        match self.s.binary_search_by(|p| p.total_cmp(&x)) {
            Ok(i) => i.min(self.s.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.s.len() - 2),
        }
    }

    fn eval(&self, x: f64) -> (f64, f64) {
        let last = self.s.len() - 1;
        if x >= self.s[last] {
            return (self.v[last] + self.m[last] * (x - self.s[last]), self.m[last]);
        }
        let i = self.segment(x);
        let h = self.s[i + 1] - self.s[i];
        let t = (x - self.s[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let val = h00 * self.v[i] + h10 * h * self.m[i] + h01 * self.v[i + 1] + h11 * h * self.m[i + 1];
        let d00 = (6.0 * t2 - 6.0 * t) / h;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = (-6.0 * t2 + 6.0 * t) / h;
        let d11 = 3.0 * t2 - 2.0 * t;
        let der = d00 * self.v[i] + d10 * self.m[i] + d01 * self.v[i + 1] + d11 * self.m[i + 1];
        (val, der)
    }
}

#[derive(Clone)]
enum NlKind {
    Power { coeff: f64, exponent: f64 },
    Table(MonotoneCubic),
    Function { label: String, f: ScalarFn, df: Option<ScalarFn> },
}

/// Constitutive nonlinearity `sigma`: increasing on `[0, inf)` with
/// `sigma(0) = 0`.
#[derive(Clone)]
pub struct Nonlinearity {
    kind: NlKind,
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonlinearity({})", self.label())
    }
}

impl Nonlinearity {
    /// `sigma(s) = s^m`.
    pub fn power(m: f64) -> Result<Self> {
        Self::scaled_power(1.0, m)
    }

    /// `sigma(s) = c s^m`.
    pub fn scaled_power(c: f64, m: f64) -> Result<Self> {
        if !(m.is_finite() && m > 0.0 && c.is_finite() && c > 0.0) {
            return Err(Error::InvalidNonlinearity(format!("power law needs c > 0, m > 0 (got c = {c}, m = {m})")));
        }
        Ok(Self { kind: NlKind::Power { coeff: c, exponent: m } })
    }

    pub fn identity() -> Self {
        Self { kind: NlKind::Power { coeff: 1.0, exponent: 1.0 } }
    }

    /// Monotone cubic interpolation through `(s, sigma(s))` pairs, extended
    /// linearly past the last point. A `(0, 0)` node is added if missing.
    pub fn tabulated(points: &[(f64, f64)]) -> Result<Self> {
        Ok(Self { kind: NlKind::Table(MonotoneCubic::new(points)?) })
    }

    /// User-supplied `sigma` and optional derivative. Monotonicity is checked
    /// on `[0, s_max]`.
    pub fn from_fn(
        label: impl Into<String>,
        f: ScalarFn,
        df: Option<ScalarFn>,
        s_max: f64,
    ) -> Result<Self> {
        let nl = Self { kind: NlKind::Function { label: label.into(), f, df } };
        validate_nonlinearity(&nl, s_max)?;
        Ok(nl)
    }

    pub fn label(&self) -> String {
        match &self.kind {
            NlKind::Power { coeff, exponent } if *coeff == 1.0 => format!("power(m={exponent})"),
            NlKind::Power { coeff, exponent } => format!("power(c={coeff}, m={exponent})"),
            NlKind::Table(t) => format!("table({} points)", t.s.len()),
            NlKind::Function { label, .. } => label.clone(),
        }
    }

    /// Exponent if this is a pure power law.
    pub fn power_exponent(&self) -> Option<f64> {
        match self.kind {
            NlKind::Power { exponent, .. } => Some(exponent),
            _ => None,
        }
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::OutsideDomain(s));
        }
        Ok(self.value(s))
    }

    pub fn deriv(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::OutsideDomain(s));
        }
        Ok(self.slope(s))
    }

    /// Unchecked evaluation for `s >= 0`.
    pub(crate) fn value(&self, s: f64) -> f64 {
        match &self.kind {
            NlKind::Power { coeff, exponent } => {
                if *exponent == 1.0 {
                    coeff * s
                } else if *exponent == 2.0 {
                    coeff * s * s
                } else {
                    coeff * s.powf(*exponent)
                }
            }
            NlKind::Table(t) => t.eval(s).0,
            NlKind::Function { f, .. } => f(s),
        }
    }

    pub(crate) fn slope(&self, s: f64) -> f64 {
        match &self.kind {
            NlKind::Power { coeff, exponent } => {
                if *exponent == 1.0 {
                    *coeff
                } else if s == 0.0 {
                    if *exponent > 1.0 { 0.0 } else { f64::INFINITY }
                } else {
                    coeff * exponent * s.powf(exponent - 1.0)
                }
            }
            NlKind::Table(t) => t.eval(s).1,
            NlKind::Function { f, df, .. } => match df {
                Some(df) => df(s),
                None => {
                    let e = 1e-6 * (1.0 + s);
                    if s >= e {
                        (f(s + e) - f(s - e)) / (2.0 * e)
                    } else {
                        (f(s + e) - f(s)) / e
                    }
                }
            },
        }
    }

    /// `sigma(base + d) - sigma(base)` without cancellation for power laws.
    pub fn increment(&self, base: f64, d: f64) -> f64 {
        match &self.kind {
            NlKind::Power { coeff, exponent } => {
                if d == 0.0 {
                    0.0
                } else if *exponent == 1.0 {
                    coeff * d
                } else if exponent.fract() == 0.0 && *exponent <= 8.0 && base >= 0.0 && base + d >= 0.0 {
                    // x^m - b^m = (x - b) sum_k x^k b^(m-1-k), a sum of
                    // nonnegative terms.
                    let x = base + d;
                    let (mut sum, mut bp) = (1.0, 1.0);
                    for _ in 1..*exponent as i32 {
                        bp *= base;
                        sum = sum * x + bp;
                    }
                    coeff * d * sum
                } else if base > 0.0 {
                    coeff * base.powf(*exponent) * (exponent * (d / base).ln_1p()).exp_m1()
                } else {
                    coeff * d.max(0.0).powf(*exponent)
                }
            }
            _ => self.value(base + d) - self.value(base),
        }
    }

    /// Solves `sigma(s) = z` for `s >= 0`.
    pub fn inverse(&self, z: f64) -> Result<f64> {
        if !(z >= 0.0) || !z.is_finite() {
            return Err(Error::OutsideDomain(z));
        }
        if z == 0.0 {
            return Ok(0.0);
        }
        if let NlKind::Power { coeff, exponent } = self.kind {
            return Ok(if exponent == 1.0 { z / coeff } else { (z / coeff).powf(1.0 / exponent) });
        }
        let mut hi = 1.0;
        let mut iters = 0;
        while self.value(hi) < z {
            hi *= 2.0;
            iters += 1;
            if iters > 1100 {
                return Err(Error::InvalidNonlinearity(format!("sigma never reaches {z}")));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.value(mid) < z {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Checks `sigma(0) = 0`, finiteness and strict monotonicity on `[0, s_max]`.
pub fn validate_nonlinearity(nl: &Nonlinearity, s_max: f64) -> Result<()> {
    if !(s_max > 0.0 && s_max.is_finite()) {
        return Err(Error::InvalidNonlinearity(format!("invalid sampling range {s_max}")));
    }
    let v0 = nl.value(0.0);
    if v0 != 0.0 {
        return Err(Error::InvalidNonlinearity(format!("sigma(0) = {v0}, expected 0")));
    }
    let k = 400;
    let mut prev = 0.0;
    for i in 1..=k {
        let s = s_max * i as f64 / k as f64;
        let v = nl.value(s);
        if !v.is_finite() {
            return Err(Error::InvalidNonlinearity(format!("sigma({s}) is not finite")));
        }
        if v <= prev {
            return Err(Error::InvalidNonlinearity(format!("sigma is not increasing near s = {s}")));
        }
        prev = v;
    }
    Ok(())
}

/// Whether a convex generator drives an `H` (relative entropy) or an `N`
/// (relative dual-entropy) functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    Phi,
    Psi,
}

#[derive(Clone)]
enum Preset {
    PhiLog,
    PhiQuad,
    PsiQuad,
    PsiPower(f64),
    Custom { label: String, f: ScalarFn, df: ScalarFn, d2f: ScalarFn },
}

/// Convex function `Phi` (normalized at 1) or `Psi` (normalized at 0).
#[derive(Clone)]
pub struct ConvexGenerator {
    kind: GeneratorKind,
    preset: Preset,
}

impl fmt::Debug for ConvexGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConvexGenerator({:?}, {})", self.kind, self.name())
    }
}

impl ConvexGenerator {
    /// `z ln z - z + 1`.
    pub fn phi_log() -> Self {
        Self { kind: GeneratorKind::Phi, preset: Preset::PhiLog }
    }

    /// `(z - 1)^2 / 2`.
    pub fn phi_quad() -> Self {
        Self { kind: GeneratorKind::Phi, preset: Preset::PhiQuad }
    }

    /// `z^2 / 2`.
    pub fn psi_quad() -> Self {
        Self { kind: GeneratorKind::Psi, preset: Preset::PsiQuad }
    }

    /// `|z|^p` with `p > 1`.
    pub fn psi_power(p: f64) -> Result<Self> {
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::InvalidGenerator(format!("power {p} must exceed 1")));
        }
        Ok(Self { kind: GeneratorKind::Psi, preset: Preset::PsiPower(p) })
    }

    /// Custom generator with explicit first and second derivatives. The
    /// normalization at the anchor point (1 for `Phi`, 0 for `Psi`) and
    /// convexity are checked on a sample.
    pub fn custom(
        kind: GeneratorKind,
        label: impl Into<String>,
        f: ScalarFn,
        df: ScalarFn,
        d2f: ScalarFn,
    ) -> Result<Self> {
        let g = Self { kind, preset: Preset::Custom { label: label.into(), f, df, d2f } };
        g.validate()?;
        Ok(g)
    }

    pub fn kind(&self) -> GeneratorKind {
        self.kind
    }

    pub fn name(&self) -> String {
        match &self.preset {
            Preset::PhiLog => "phi_log".into(),
            Preset::PhiQuad => "phi_quad".into(),
            Preset::PsiQuad => "psi_quad".into(),
            Preset::PsiPower(p) => format!("psi_power({p})"),
            Preset::Custom { label, .. } => label.clone(),
        }
    }

    fn anchor(&self) -> f64 {
        match self.kind {
            GeneratorKind::Phi => 1.0,
            GeneratorKind::Psi => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let a = self.anchor();
        let scale = 1.0 + self.eval(a + 1.0).abs();
        if self.eval(a).abs() > 1e-12 * scale || self.deriv1(a).abs() > 1e-12 * scale {
            return Err(Error::InvalidGenerator(format!(
                "{} is not normalized at {a}",
                self.name()
            )));
        }
        let lo = if self.kind == GeneratorKind::Phi { 0.01 } else { -5.0 };
        for i in 0..=200 {
            let z = lo + (5.0 - lo) * i as f64 / 200.0;
            let d2 = self.deriv2(z);
            if !(d2 > 0.0) {
                return Err(Error::InvalidGenerator(format!("{} is not strictly convex at {z}", self.name())));
            }
        }
        Ok(())
    }

    pub fn eval(&self, z: f64) -> f64 {
        match &self.preset {
            Preset::PhiLog => {
                if z == 0.0 {
                    1.0
                } else {
                    z * z.ln() - z + 1.0
                }
            }
            Preset::PhiQuad => 0.5 * (z - 1.0) * (z - 1.0),
            Preset::PsiQuad => 0.5 * z * z,
            Preset::PsiPower(p) => z.abs().powf(*p),
            Preset::Custom { f, .. } => f(z),
        }
    }

    pub fn deriv1(&self, z: f64) -> f64 {
        match &self.preset {
            Preset::PhiLog => z.ln(),
            Preset::PhiQuad => z - 1.0,
            Preset::PsiQuad => z,
            Preset::PsiPower(p) => p * z.abs().powf(p - 1.0) * z.signum(),
            Preset::Custom { df, .. } => df(z),
        }
    }

    pub fn deriv2(&self, z: f64) -> f64 {
        match &self.preset {
            Preset::PhiLog => 1.0 / z,
            Preset::PhiQuad => 1.0,
            Preset::PsiQuad => 1.0,
            Preset::PsiPower(p) => p * (p - 1.0) * z.abs().powf(p - 2.0),
            Preset::Custom { d2f, .. } => d2f(z),
        }
    }

    /// Derivative evaluated at `anchor + w`, accurate for small `w`.
    pub fn deriv1_shifted(&self, w: f64) -> f64 {
        match (&self.preset, self.kind) {
            (Preset::PhiLog, _) => w.ln_1p(),
            (Preset::PhiQuad, _) => w,
            (_, GeneratorKind::Phi) => self.deriv1(1.0 + w),
            (_, GeneratorKind::Psi) => self.deriv1(w),
        }
    }

    /// Value at `anchor + w`, accurate for small `w`.
    pub fn eval_shifted(&self, w: f64) -> f64 {
        match (&self.preset, self.kind) {
            (Preset::PhiLog, _) => {
                if w.abs() < 1e-2 {
                    // (1 + w) ln(1 + w) - w = sum_{k>=2} (-1)^k w^k / (k (k - 1))
                    let mut term = w;
                    let mut sum = 0.0;
                    for k in 2..=12 {
                        term *= -w;
                        sum -= term / (k * (k - 1)) as f64;
                    }
                    sum
                } else {
                    (1.0 + w) * w.ln_1p() - w
                }
            }
            (Preset::PhiQuad, _) => 0.5 * w * w,
            (_, GeneratorKind::Phi) => self.eval(1.0 + w),
            (_, GeneratorKind::Psi) => self.eval(w),
        }
    }

    /// Bregman divergence `G(a) - G(b) - G'(b)(a - b)` in shifted
    /// coordinates.
    pub fn bregman_shifted(&self, wa: f64, wb: f64) -> f64 {
        self.eval_shifted(wa) - self.eval_shifted(wb) - self.deriv1_shifted(wb) * (wa - wb)
    }
}

/// Density values on the cells of a grid or the states of a kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn constant(n: usize, v: f64) -> Self {
        Self { values: vec![v; n] }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(Point) -> f64) -> Self {
        Self { values: grid.cells.iter().map(|c| f(c.center)).collect() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `sum nu_x f_x`.
    pub fn mass(&self, nu: &[f64]) -> f64 {
        self.values.iter().zip(nu).map(|(f, n)| f * n).sum()
    }

    /// Checks length and that all values are finite and nonnegative.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.values.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.values.len() });
        }
        if let Some((i, v)) = self.values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidDensity(format!("value {v} at cell {i}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn volumes_sum_to_domain() {
        let g = make_uniform_grid(1, 11, FieldSpec::Zero, DiffusionSpec::Identity).unwrap();
        let v: f64 = g.cells.iter().map(|c| c.volume).sum();
        assert!((v - 1.0).abs() < 1e-15);
        assert_eq!(g.faces.len(), 10);
        let g = GridBuilder::new(2, 7).length(2.0).build().unwrap();
        let v: f64 = g.cells.iter().map(|c| c.volume).sum();
        assert!((v - 4.0).abs() < 1e-14);
        assert_eq!(g.faces.len(), 2 * 7 * 6);
        assert_eq!(g.interior_count(), 25);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(GridBuilder::new(3, 5).build().is_err());
        assert!(GridBuilder::new(1, 2).build().is_err());
        assert!(GridBuilder::new(1, 5).diffusion(DiffusionSpec::Scalar(-1.0)).build().is_err());
        let off = DiffusionSpec::Matrix([[1.0, 0.2], [0.2, 1.0]]);
        assert!(GridBuilder::new(2, 5).diffusion(off).build().is_err());
        let w: ScalarFieldFn = Arc::new(|_| 0.0);
        assert!(GridBuilder::new(1, 5).weight(w).build().is_err());
    }

    #[test]
    fn power_law_inverse_and_increment() {
        let s = Nonlinearity::power(3.0).unwrap();
        assert_eq!(s.eval(2.0).unwrap(), 8.0);
        assert!((s.inverse(27.0).unwrap() - 3.0).abs() < 1e-14);
        assert!(s.eval(-1.0).is_err());
        let inc = s.increment(1.5, 1e-20);
        assert!((inc / (3.0 * 1.5 * 1.5 * 1e-20) - 1.0).abs() < 1e-14);
        assert!(Nonlinearity::power(0.0).is_err());
    }

    #[test]
    fn tabulated_matches_nodes_and_is_monotone() {
        let pts: Vec<(f64, f64)> = (1..=20).map(|i| { let s = i as f64 * 0.25; (s, s * s) }).collect();
        let t = Nonlinearity::tabulated(&pts).unwrap();
        for &(s, v) in &pts {
            assert!((t.eval(s).unwrap() - v).abs() < 1e-12);
        }
        validate_nonlinearity(&t, 8.0).unwrap();
        assert!((t.inverse(4.0).unwrap() - 2.0).abs() < 1e-10);
        assert!(Nonlinearity::tabulated(&[(1.0, 1.0), (2.0, 0.5)]).is_err());
    }

    #[test]
    fn from_fn_validation() {
        let bad: ScalarFn = Arc::new(|s: f64| (s * 3.0).sin());
        assert!(Nonlinearity::from_fn("sin", bad, None, 2.0).is_err());
        let good: ScalarFn = Arc::new(|s: f64| s / (1.0 + s));
        let nl = Nonlinearity::from_fn("sat", good, None, 10.0).unwrap();
        assert!((nl.deriv(1.0).unwrap() - 0.25).abs() < 1e-9);
        assert!((nl.inverse(0.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generator_presets() {
        let p = ConvexGenerator::phi_log();
        assert_eq!(p.eval(1.0), 0.0);
        assert_eq!(p.eval(0.0), 1.0);
        for w in [-0.5, -1e-3, 1e-5, 0.3, 2.0] {
            assert!((p.eval_shifted(w) - p.eval(1.0 + w)).abs() < 1e-15);
        }
        assert!(ConvexGenerator::psi_power(1.0).is_err());
        let bad = ConvexGenerator::custom(
            GeneratorKind::Psi,
            "shifted",
            Arc::new(|z: f64| (z - 1.0).powi(2)),
            Arc::new(|z: f64| 2.0 * (z - 1.0)),
            Arc::new(|_| 2.0),
        );
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn power_increment_matches_difference(base in 0.1f64..5.0, d in -0.09f64..3.0, m in 1.0f64..4.0) {
            let s = Nonlinearity::power(m).unwrap();
            let direct = s.value(base + d) - s.value(base);
            prop_assert!((s.increment(base, d) - direct).abs() <= 1e-12 * (1.0 + s.value(base + d)));
        }

        #[test]
        fn tabulated_is_increasing(a in 0.0f64..6.0, b in 0.0f64..6.0) {
            let pts: Vec<(f64, f64)> = (1..=12).map(|i| { let s = i as f64 * 0.5; (s, s.powf(1.5) + s) }).collect();
            let t = Nonlinearity::tabulated(&pts).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(t.value(lo) <= t.value(hi));
        }

        #[test]
        fn bregman_is_nonnegative(wa in -0.99f64..3.0, wb in -0.99f64..3.0) {
            for g in [ConvexGenerator::phi_log(), ConvexGenerator::phi_quad()] {
                prop_assert!(g.bregman_shifted(wa, wb) >= -1e-14);
            }
        }
    }
}
