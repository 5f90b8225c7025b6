//! Run configuration: one experiment per TOML file.
//!
//! Every file has a top-level `kind`, an optional `seed` and an optional
//! `[tolerances]` table; the remaining keys belong to the experiment and are
//! checked against its schema, with unknown keys rejected.

use std::path::{Path, PathBuf};

use relent_core::model::Point;
use relent_core::{BoundaryCondition, ConvexGenerator, DensityField, DiffusionSpec, DriftScheme, FieldSpec, Grid, GridBuilder, Nonlinearity};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{CliError, Result};

pub const KINDS: [&str; 9] =
    ["evolve", "stationary", "eigen", "decay-certificate", "markov", "systems", "zrp", "gl", "sweep"];

/// Overrides of the numerical tolerances used by the experiments.
#[derive(Debug, Clone, Copy, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Stationary residual relative to `max rate * max sigma(f)`.
    pub stationary: f64,
    /// Newton residual relative to the step size.
    pub newton: f64,
    /// Allowed relative per-step increase of a logged functional.
    pub monotone: f64,
    /// Relative slack when comparing a fitted rate with its certificate.
    pub certificate_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { stationary: 1e-11, newton: 1e-11, monotone: 1e-10, certificate_slack: 0.05 }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub tolerances: Tolerances,
    pub experiment: Experiment,
    /// Directory of the config file; relative paths inside it resolve here.
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub enum Experiment {
    Evolve(EvolveConfig),
    Stationary(StationaryConfig),
    Eigen(EigenConfig),
    DecayCertificate(EvolveConfig),
    Markov(MarkovConfig),
    Systems(SystemsConfig),
    Zrp(ZrpConfig),
    Gl(GlConfig),
    Sweep(SweepConfig),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Evolve(_) => "evolve",
            Experiment::Stationary(_) => "stationary",
            Experiment::Eigen(_) => "eigen",
            Experiment::DecayCertificate(_) => "decay-certificate",
            Experiment::Markov(_) => "markov",
            Experiment::Systems(_) => "systems",
            Experiment::Zrp(_) => "zrp",
            Experiment::Gl(_) => "gl",
            Experiment::Sweep(_) => "sweep",
        }
    }
}

fn schema<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Schema(e.to_string())
}

fn take<T: DeserializeOwned>(table: toml::Table) -> Result<T> {
    toml::Value::Table(table).try_into().map_err(schema)
}

/// Parses and validates a configuration from text.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let table: toml::Table = toml::from_str(text).map_err(schema)?;
    parse_table(table, base_dir)
}

/// Reads, parses and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}

pub(crate) fn parse_table(mut table: toml::Table, base_dir: &Path) -> Result<RunConfig> {
    let kind = match table.remove("kind") {
        Some(toml::Value::String(s)) => s,
        Some(v) => return Err(CliError::Schema(format!("kind must be a string, got {v}"))),
        None => return Err(CliError::Schema(format!("missing key `kind` (one of {})", KINDS.join(", ")))),
    };
    let seed = match table.remove("seed") {
        None => None,
        Some(toml::Value::Integer(i)) if i >= 0 => Some(i as u64),
        Some(v) => return Err(CliError::Schema(format!("seed must be a nonnegative integer, got {v}"))),
    };
    let tolerances = match table.remove("tolerances") {
        None => Tolerances::default(),
        Some(toml::Value::Table(t)) => take(t)?,
        Some(v) => return Err(CliError::Schema(format!("tolerances must be a table, got {v}"))),
    };
    let experiment = match kind.as_str() {
        "evolve" => Experiment::Evolve(take(table)?),
        "stationary" => Experiment::Stationary(take(table)?),
        "eigen" => Experiment::Eigen(take(table)?),
        "decay-certificate" => Experiment::DecayCertificate(take(table)?),
        "markov" => Experiment::Markov(take(table)?),
        "systems" => Experiment::Systems(take(table)?),
        "zrp" => Experiment::Zrp(take(table)?),
        "gl" => Experiment::Gl(take(table)?),
        "sweep" => Experiment::Sweep(take(table)?),
        other => return Err(CliError::Schema(format!("unknown kind `{other}` (expected one of {})", KINDS.join(", ")))),
    };
    let cfg = RunConfig { seed, tolerances, experiment, base_dir: base_dir.to_path_buf() };
    cfg.validate()?;
    Ok(cfg)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Schema(msg()))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    ensure(v > 0.0 && v.is_finite(), || format!("{name} = {v} must be positive and finite"))
}

impl RunConfig {
    /// Semantic checks, including building every cheap model object once.
    pub fn validate(&self) -> Result<()> {
        ensure(self.tolerances.stationary > 0.0, || "tolerances.stationary must be positive".into())?;
        ensure(self.tolerances.newton > 0.0, || "tolerances.newton must be positive".into())?;
        ensure(self.tolerances.monotone >= 0.0, || "tolerances.monotone must be nonnegative".into())?;
        ensure((0.0..1.0).contains(&self.tolerances.certificate_slack), || {
            "tolerances.certificate_slack must lie in [0, 1)".into()
        })?;
        match &self.experiment {
            Experiment::Evolve(c) => c.validate(false),
            Experiment::DecayCertificate(c) => c.validate(true),
            Experiment::Stationary(c) => c.validate(),
            Experiment::Eigen(c) => c.grid().map(|_| ()),
            Experiment::Markov(c) => c.kernel(&self.base_dir).map(|_| ()).and_then(|_| c.validate()),
            Experiment::Systems(c) => c.validate(),
            Experiment::Zrp(c) => c.validate(),
            Experiment::Gl(c) => c.validate(),
            Experiment::Sweep(c) => c.validate(),
        }
    }
}

// Shared sections

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    #[default]
    Upwind,
    Centered,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one")]
    pub dim: usize,
    /// Nodes per axis, boundary nodes included.
    pub n: usize,
    #[serde(default = "one_f")]
    pub length: f64,
    /// Constant drift field, one component per dimension.
    #[serde(default)]
    pub field: Vec<f64>,
    /// Scalar diffusion coefficient.
    #[serde(default = "one_f")]
    pub diffusion: f64,
    #[serde(default = "dirichlet")]
    pub boundary: BoundaryCondition,
    #[serde(default)]
    pub scheme: SchemeName,
    /// Largest cell Peclet number accepted by the centered scheme.
    #[serde(default = "two")]
    pub max_peclet: f64,
}

fn dirichlet() -> BoundaryCondition {
    BoundaryCondition::Dirichlet
}

fn two() -> f64 {
    2.0
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid> {
        ensure(self.field.len() <= self.dim, || {
            format!("grid.field has {} components for dimension {}", self.field.len(), self.dim)
        })?;
        positive("grid.diffusion", self.diffusion)?;
        let mut e = [0.0; 2];
        for (k, v) in self.field.iter().enumerate() {
            ensure(v.is_finite(), || "grid.field must be finite".into())?;
            e[k] = *v;
        }
        let field = if e == [0.0, 0.0] { FieldSpec::Zero } else { FieldSpec::Constant(e) };
        let diffusion = if self.diffusion == 1.0 { DiffusionSpec::Identity } else { DiffusionSpec::Scalar(self.diffusion) };
        GridBuilder::new(self.dim, self.n)
            .length(self.length)
            .field(field)
            .diffusion(diffusion)
            .neumann(self.boundary == BoundaryCondition::Neumann)
            .build()
            .map_err(schema)
    }

    pub fn drift_scheme(&self) -> DriftScheme {
        match self.scheme {
            SchemeName::Upwind => DriftScheme::Upwind,
            SchemeName::Centered => DriftScheme::Centered { max_peclet: self.max_peclet },
        }
    }

    pub fn generator(&self, grid: &Grid) -> Result<relent_core::DiscreteGenerator> {
        relent_core::generator::assemble_with_scheme(grid, self.boundary, self.drift_scheme()).map_err(schema)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearityConfig {
    /// `sigma(s) = s^m`.
    Power { m: f64 },
    /// `sigma(s) = c s^m`.
    ScaledPower { c: f64, m: f64 },
    Identity,
    /// Monotone interpolation through `(s, sigma)` points.
    Table { points: Vec<(f64, f64)> },
}

impl NonlinearityConfig {
    pub fn build(&self) -> Result<Nonlinearity> {
        match self {
            NonlinearityConfig::Power { m } => Nonlinearity::power(*m),
            NonlinearityConfig::ScaledPower { c, m } => Nonlinearity::scaled_power(*c, *m),
            NonlinearityConfig::Identity => Ok(Nonlinearity::identity()),
            NonlinearityConfig::Table { points } => Nonlinearity::tabulated(points),
        }
        .map_err(schema)
    }

    /// Exponent of a pure power law, the only case with a decay certificate.
    pub fn power_exponent(&self) -> Option<f64> {
        match self {
            NonlinearityConfig::Power { m } => Some(*m),
            NonlinearityConfig::Identity => Some(1.0),
            _ => None,
        }
    }
}

/// Boundary data varying linearly in `x` from `left` to `right`.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryData {
    pub left: f64,
    pub right: f64,
}

impl BoundaryData {
    pub fn at(&self, x: Point, length: f64) -> f64 {
        self.left + (self.right - self.left) * x[0] / length
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Constant { value: f64 },
    /// `base + amplitude * prod_axes sin(mode pi x / L)`.
    Sine {
        base: f64,
        amplitude: f64,
        #[serde(default = "one")]
        mode: usize,
    },
    Linear { left: f64, right: f64 },
    /// `low` for `x < at`, `high` otherwise.
    Step { low: f64, high: f64, at: f64 },
    Values { values: Vec<f64> },
}

impl InitialConfig {
    pub fn eval(&self, x: Point, dim: usize, length: f64) -> f64 {
        match self {
            InitialConfig::Constant { value } => *value,
            InitialConfig::Sine { base, amplitude, mode } => {
                let k = *mode as f64 * std::f64::consts::PI / length;
                let mut s = (k * x[0]).sin();
                if dim == 2 {
                    s *= (k * x[1]).sin();
                }
                base + amplitude * s
            }
            InitialConfig::Linear { left, right } => left + (right - left) * x[0] / length,
            InitialConfig::Step { low, high, at } => {
                if x[0] < *at {
                    *low
                } else {
                    *high
                }
            }
            InitialConfig::Values { .. } => f64::NAN,
        }
    }

    /// The initial field on `grid`, with boundary data imposed on
    /// boundary nodes when given.
    pub fn field(&self, grid: &Grid, boundary: Option<&BoundaryData>) -> Result<DensityField> {
        let centers = grid.centers();
        let mut v: Vec<f64> = match self {
            InitialConfig::Values { values } => {
                ensure(values.len() == grid.len(), || {
                    format!("initial.values has {} entries for {} nodes", values.len(), grid.len())
                })?;
                values.clone()
            }
            _ => centers.iter().map(|&x| self.eval(x, grid.dim, grid.length)).collect(),
        };
        if let Some(b) = boundary {
            for (i, x) in centers.iter().enumerate() {
                if grid.is_boundary(i) {
                    v[i] = b.at(*x, grid.length);
                }
            }
        }
        ensure(v.iter().all(|x| x.is_finite() && *x >= 0.0), || "initial data must be finite and nonnegative".into())?;
        Ok(DensityField::new(v))
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeScheme {
    #[default]
    Implicit,
    Explicit,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(default)]
    pub scheme: TimeScheme,
    pub dt: f64,
    pub t_end: f64,
    /// Log every `stride` steps.
    #[serde(default = "one")]
    pub stride: usize,
    /// Write the density at every logged time.
    #[serde(default)]
    pub snapshots: bool,
}

impl TimeConfig {
    fn validate(&self) -> Result<()> {
        positive("time.dt", self.dt)?;
        positive("time.t_end", self.t_end)?;
        ensure(self.stride >= 1, || "time.stride must be at least 1".into())?;
        ensure(self.t_end / self.dt <= 1e9, || "more than 1e9 time steps requested".into())
    }

    pub fn stepper(&self, tol: &Tolerances) -> relent_core::evolve::TimeStepper {
        use relent_core::evolve::TimeStepper;
        let mut s = match self.scheme {
            TimeScheme::Implicit => TimeStepper::implicit(self.dt, self.t_end),
            TimeScheme::Explicit => TimeStepper::explicit(self.dt, self.t_end),
        }
        .stride(self.stride);
        s.newton_tol = tol.newton;
        if self.snapshots {
            s = s.with_densities();
        }
        s
    }
}

/// Entropy generator by name: `phi_log`, `phi_quad`, `psi_quad` or
/// `psi_power:p`.
pub fn convex_generator(name: &str) -> Result<ConvexGenerator> {
    match name {
        "phi_log" => Ok(ConvexGenerator::phi_log()),
        "phi_quad" => Ok(ConvexGenerator::phi_quad()),
        "psi_quad" => Ok(ConvexGenerator::psi_quad()),
        other => match other.strip_prefix("psi_power:") {
            Some(p) => {
                let p: f64 = p.parse().map_err(|_| CliError::Schema(format!("bad exponent in `{other}`")))?;
                ConvexGenerator::psi_power(p).map_err(schema)
            }
            None => Err(CliError::Schema(format!(
                "unknown entropy `{other}` (expected phi_log, phi_quad, psi_quad or psi_power:p)"
            ))),
        },
    }
}

fn default_entropies() -> Vec<String> {
    vec!["phi_log".into(), "phi_quad".into(), "psi_quad".into()]
}

fn default_column() -> String {
    "N_psi".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateConfig {
    /// Logged functional whose decay rate is fitted.
    #[serde(default = "default_column")]
    pub column: String,
    /// Fit window; the latter half is used. Defaults to the whole run.
    pub window: Option<(f64, f64)>,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self { column: default_column(), window: None }
    }
}

// Experiments

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveConfig {
    pub grid: GridConfig,
    pub nonlinearity: NonlinearityConfig,
    pub boundary: Option<BoundaryData>,
    pub initial: InitialConfig,
    pub time: TimeConfig,
    #[serde(default = "default_entropies")]
    pub entropies: Vec<String>,
    pub certificate: Option<CertificateConfig>,
}

impl EvolveConfig {
    fn validate(&self, certificate_required: bool) -> Result<()> {
        let grid = self.grid.build()?;
        self.grid.generator(&grid)?;
        self.nonlinearity.build()?;
        self.time.validate()?;
        let dirichlet = self.grid.boundary == BoundaryCondition::Dirichlet;
        ensure(!dirichlet || self.boundary.is_some() || matches!(self.initial, InitialConfig::Values { .. }), || {
            "Dirichlet grids need a [boundary] table (or explicit initial values)".into()
        })?;
        self.initial.field(&grid, self.boundary.as_ref())?;
        for e in &self.entropies {
            convex_generator(e)?;
        }
        if certificate_required {
            ensure(self.nonlinearity.power_exponent().is_some(), || {
                "a decay certificate needs a power-law nonlinearity".into()
            })?;
            ensure(dirichlet, || "a decay certificate needs Dirichlet boundaries".into())?;
        }
        if let Some(c) = &self.certificate {
            if let Some((a, b)) = c.window {
                ensure(b > a, || format!("certificate.window [{a}, {b}] is empty"))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationaryConfig {
    pub grid: GridConfig,
    pub nonlinearity: NonlinearityConfig,
    pub boundary: Option<BoundaryData>,
    /// Initial guess; for closed systems it also fixes the mass.
    pub initial: Option<InitialConfig>,
    /// Total mass of a closed system.
    pub mass: Option<f64>,
}

impl StationaryConfig {
    fn validate(&self) -> Result<()> {
        let grid = self.grid.build()?;
        self.grid.generator(&grid)?;
        self.nonlinearity.build()?;
        let dirichlet = self.grid.boundary == BoundaryCondition::Dirichlet;
        ensure(!dirichlet || self.boundary.is_some(), || "Dirichlet grids need a [boundary] table".into())?;
        ensure(dirichlet || self.initial.is_some() || self.mass.is_some(), || {
            "closed systems need an initial guess or a mass".into()
        })?;
        if let Some(i) = &self.initial {
            i.field(&grid, self.boundary.as_ref())?;
        }
        if let Some(m) = self.mass {
            positive("mass", m)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenConfig {
    #[serde(default = "one")]
    pub dim: usize,
    pub n: usize,
    #[serde(default = "one_f")]
    pub length: f64,
}

impl EigenConfig {
    pub fn grid(&self) -> Result<Grid> {
        GridBuilder::new(self.dim, self.n).length(self.length).build().map_err(schema)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoltzmannConfig {
    pub velocities: Vec<f64>,
    pub background: Vec<f64>,
    #[serde(default = "one_f")]
    pub rate: f64,
    pub restitution: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovConfig {
    /// Reference measure; defaults to all ones.
    pub nu: Option<Vec<f64>>,
    /// Rates `[from, to, K]`.
    pub rates: Option<Vec<(usize, usize, f64)>>,
    /// COO file with lines `from to K`, relative to the config file.
    pub coo_file: Option<String>,
    pub boltzmann: Option<BoltzmannConfig>,
    /// `[state, value]` pairs held fixed.
    #[serde(default)]
    pub clamps: Vec<(usize, f64)>,
    pub nonlinearity: NonlinearityConfig,
    pub initial: Vec<f64>,
    pub time: Option<TimeConfig>,
    #[serde(default = "default_entropies")]
    pub entropies: Vec<String>,
}

impl MarkovConfig {
    fn validate(&self) -> Result<()> {
        self.nonlinearity.build()?;
        if let Some(t) = &self.time {
            t.validate()?;
        }
        for e in &self.entropies {
            convex_generator(e)?;
        }
        ensure(self.initial.iter().all(|v| v.is_finite() && *v >= 0.0), || {
            "initial must be finite and nonnegative".into()
        })
    }

    pub fn kernel(&self, base_dir: &Path) -> Result<relent_core::markov::KernelSpec> {
        use relent_core::markov::{scattering_example_linear_boltzmann, BoltzmannSpec, KernelSpec};
        let sources = [self.rates.is_some(), self.coo_file.is_some(), self.boltzmann.is_some()];
        ensure(sources.iter().filter(|s| **s).count() == 1, || {
            "give exactly one of rates, coo_file or [boltzmann]".into()
        })?;
        let nu_for = |n: usize| -> Result<Vec<f64>> {
            match &self.nu {
                Some(nu) => {
                    ensure(nu.len() == n, || format!("nu has {} entries for {n} states", nu.len()))?;
                    Ok(nu.clone())
                }
                None => Ok(vec![1.0; n]),
            }
        };
        let mut kernel = if let Some(rates) = &self.rates {
            let n = self.nu.as_ref().map_or(self.initial.len(), Vec::len);
            KernelSpec::new(nu_for(n)?, rates.clone()).map_err(schema)?
        } else if let Some(file) = &self.coo_file {
            let path = base_dir.join(file);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
            KernelSpec::parse_coo(&text, nu_for(self.initial.len())?).map_err(schema)?
        } else {
            let b = self.boltzmann.as_ref().expect("checked above");
            scattering_example_linear_boltzmann(&BoltzmannSpec {
                velocities: b.velocities.clone(),
                background: b.background.clone(),
                rate: b.rate,
                restitution: b.restitution,
            })
            .map_err(schema)
            .and_then(|k| match &self.nu {
                Some(_) => KernelSpec::new(nu_for(k.n_states)?, k.rates).map_err(schema),
                None => Ok(k),
            })?
        };
        for &(s, v) in &self.clamps {
            kernel = kernel.with_clamp(s, v).map_err(schema)?;
        }
        ensure(self.initial.len() == kernel.n_states, || {
            format!("initial has {} entries for {} states", self.initial.len(), kernel.n_states)
        })?;
        Ok(kernel)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PairConfig {
    /// `sigma1 = sigma2 = (s1 + s2)^m`.
    SumPower { m: f64 },
    /// `sigma_i = s_i`.
    Decoupled,
    /// `(s1 s2^2, s2)`: no potential for either functional.
    ProductCross,
    /// `(s1 + 2 s2, s2)`.
    LinearCross,
}

impl PairConfig {
    pub fn build(&self) -> Result<relent_core::systems::SpeciesPair> {
        use relent_core::systems::SpeciesPair;
        use std::sync::Arc;
        match self {
            PairConfig::SumPower { m } => SpeciesPair::sum_power(*m).map_err(schema),
            PairConfig::Decoupled => Ok(SpeciesPair::decoupled_identity()),
            PairConfig::ProductCross => Ok(SpeciesPair::new(
                "product_cross",
                Arc::new(|a: f64, b: f64| a * b * b),
                Arc::new(|_: f64, b: f64| b),
            )),
            PairConfig::LinearCross => Ok(SpeciesPair::new(
                "linear_cross",
                Arc::new(|a: f64, b: f64| a + 2.0 * b),
                Arc::new(|_: f64, b: f64| b),
            )),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemsConfig {
    pub grid: GridConfig,
    pub pair: PairConfig,
    pub boundary1: Option<BoundaryData>,
    pub boundary2: Option<BoundaryData>,
    pub initial1: InitialConfig,
    pub initial2: InitialConfig,
    pub time: TimeConfig,
    pub certificate: Option<CertificateConfig>,
}

impl SystemsConfig {
    fn validate(&self) -> Result<()> {
        ensure(self.grid.dim == 1, || "systems runs are one-dimensional".into())?;
        let grid = self.grid.build()?;
        self.grid.generator(&grid)?;
        self.pair.build()?;
        self.time.validate()?;
        let dirichlet = self.grid.boundary == BoundaryCondition::Dirichlet;
        ensure(!dirichlet || (self.boundary1.is_some() && self.boundary2.is_some()), || {
            "Dirichlet grids need [boundary1] and [boundary2]".into()
        })?;
        self.initial1.field(&grid, self.boundary1.as_ref())?;
        self.initial2.field(&grid, self.boundary2.as_ref())?;
        if self.certificate.is_some() {
            ensure(matches!(self.pair, PairConfig::SumPower { .. }) && dirichlet, || {
                "a coupled certificate needs the sum_power pair and Dirichlet boundaries".into()
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateConfig {
    /// `g(n) = n`.
    Linear,
    /// `g(n) = c` for `n >= 1`.
    Constant {
        #[serde(default = "one_f")]
        c: f64,
    },
    /// `g(n) = c n^a`.
    Power { c: f64, a: f64 },
}

impl RateConfig {
    pub fn build(&self) -> relent_micro::RateFn {
        use relent_micro::RateFn;
        match self {
            RateConfig::Linear => RateFn::Linear,
            RateConfig::Constant { c } => RateFn::Constant(*c),
            RateConfig::Power { c, a } => RateFn::Power { c: *c, a: *a },
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ZrpBoundaryConfig {
    Ring,
    Closed,
    Reservoirs { left: f64, right: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovConfig {
    #[serde(default = "default_f_column")]
    pub column: String,
    /// Noise band in standard errors.
    #[serde(default = "three")]
    pub band: f64,
    /// Monitoring window; defaults to the whole run.
    pub window: Option<(f64, f64)>,
}

fn default_f_column() -> String {
    "F".into()
}

fn three() -> f64 {
    3.0
}

/// Second species with the coupling `u = n c^m`, `v = m c^n`.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoSpeciesConfig {
    pub coupling: f64,
    /// Fugacities of the initial product measure.
    pub lambda: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZrpConfig {
    pub n: usize,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default = "linear_rate")]
    pub rate: RateConfig,
    pub boundary: ZrpBoundaryConfig,
    #[serde(default)]
    pub field: Vec<f64>,
    /// Initial density profile sampled from the product measure.
    pub initial: Option<InitialConfig>,
    pub two_species: Option<TwoSpeciesConfig>,
    pub t_end: f64,
    pub obs_dt: f64,
    #[serde(default)]
    pub burn_in: f64,
    #[serde(default = "one")]
    pub replicas: usize,
    /// Sites per block of the smoothed profile.
    pub block: Option<usize>,
    #[serde(default = "default_max_events")]
    pub max_events: u64,
    pub lyapunov: Option<LyapunovConfig>,
}

fn linear_rate() -> RateConfig {
    RateConfig::Linear
}

fn default_max_events() -> u64 {
    10_000_000_000
}

impl ZrpConfig {
    pub fn model(&self) -> relent_micro::ZrpModel {
        use relent_micro::site::PairRates;
        use relent_micro::{Species, ZrpBoundary, ZrpModel};
        let species = match &self.two_species {
            Some(t) => Species::Two(PairRates::exponential_coupling(t.coupling)),
            None => Species::One(self.rate.build()),
        };
        let boundary = match self.boundary {
            ZrpBoundaryConfig::Ring => ZrpBoundary::Ring,
            ZrpBoundaryConfig::Closed => ZrpBoundary::Closed,
            ZrpBoundaryConfig::Reservoirs { left, right } => ZrpBoundary::Reservoirs { left, right },
        };
        let mut e = [0.0; 2];
        for (k, v) in self.field.iter().take(2).enumerate() {
            e[k] = *v;
        }
        let field = if e == [0.0, 0.0] { FieldSpec::Zero } else { FieldSpec::Constant(e) };
        ZrpModel::new(self.n, self.dim, species, boundary).with_field(field)
    }

    fn validate(&self) -> Result<()> {
        ensure(self.field.len() <= self.dim, || "field has more components than dimensions".into())?;
        self.model().validate().map_err(schema)?;
        positive("t_end", self.t_end)?;
        positive("obs_dt", self.obs_dt)?;
        ensure(self.burn_in >= 0.0 && self.burn_in < self.t_end, || "burn_in must lie in [0, t_end)".into())?;
        ensure(self.replicas >= 1, || "replicas must be at least 1".into())?;
        ensure(self.two_species.is_some() || self.initial.is_some(), || "single-species runs need [initial]".into())?;
        if let Some(t) = &self.two_species {
            positive("two_species.lambda", t.lambda)?;
            positive("two_species.gamma", t.gamma)?;
        }
        if self.lyapunov.is_some() {
            ensure(self.replicas >= 2, || "the Lyapunov monitor needs at least 2 replicas".into())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialConfig {
    /// `V(x) = x^2 / 2`.
    Quadratic,
    /// `V(x) = x^2 / 2 + c x^4 / 4`.
    Quartic { c: f64 },
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GlBoundaryConfig {
    Periodic,
    Reservoirs { a: f64, b: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlConfig {
    pub n: usize,
    #[serde(default = "quadratic")]
    pub potential: PotentialConfig,
    pub boundary: GlBoundaryConfig,
    pub dt: f64,
    pub t_end: f64,
    pub obs_dt: f64,
    #[serde(default)]
    pub burn_in: f64,
    /// Initial spins `xi_i = initial(x_i)` with `x_i = i / (N + 1)`.
    pub initial: InitialConfig,
    #[serde(default = "one")]
    pub replicas: usize,
    pub block: Option<usize>,
}

fn quadratic() -> PotentialConfig {
    PotentialConfig::Quadratic
}

impl GlConfig {
    pub fn model(&self) -> relent_micro::gl::GlModel {
        use relent_micro::gl::{GlBoundary, GlModel, Potential};
        GlModel {
            n: self.n,
            potential: match self.potential {
                PotentialConfig::Quadratic => Potential::Quadratic,
                PotentialConfig::Quartic { c } => Potential::Quartic { c },
            },
            boundary: match self.boundary {
                GlBoundaryConfig::Periodic => GlBoundary::Periodic,
                GlBoundaryConfig::Reservoirs { a, b } => GlBoundary::Reservoirs { a, b },
            },
            dt: self.dt,
        }
    }

    pub fn initial_spins(&self) -> Result<Vec<f64>> {
        let v: Vec<f64> = match &self.initial {
            InitialConfig::Values { values } => {
                ensure(values.len() == self.n, || format!("initial.values has {} entries for {} sites", values.len(), self.n))?;
                values.clone()
            }
            i => (1..=self.n).map(|k| i.eval([k as f64 / (self.n + 1) as f64, 0.0], 1, 1.0)).collect(),
        };
        ensure(v.iter().all(|x| x.is_finite()), || "initial spins must be finite".into())?;
        Ok(v)
    }

    fn validate(&self) -> Result<()> {
        ensure(self.n >= 2, || "n must be at least 2".into())?;
        positive("dt", self.dt)?;
        positive("t_end", self.t_end)?;
        positive("obs_dt", self.obs_dt)?;
        ensure(self.burn_in >= 0.0 && self.burn_in < self.t_end, || "burn_in must lie in [0, t_end)".into())?;
        ensure(self.replicas >= 1, || "replicas must be at least 1".into())?;
        if let PotentialConfig::Quartic { c } = self.potential {
            ensure(c >= 0.0, || "the quartic coefficient must be nonnegative".into())?;
        }
        self.initial_spins().map(|_| ())
    }
}

pub const MAX_SWEEP_POINTS: usize = 10_000;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Complete configuration of one run (with its own `kind`).
    pub base: toml::Table,
    /// Dotted key path into `base` mapped to the values to try.
    pub parameters: toml::Table,
}

impl SweepConfig {
    /// Parameter names and value lists in sorted key order.
    pub fn axes(&self) -> Result<Vec<(String, Vec<toml::Value>)>> {
        let mut axes = Vec::new();
        for (k, v) in &self.parameters {
            match v {
                toml::Value::Array(a) => axes.push((k.clone(), a.clone())),
                other => return Err(CliError::Schema(format!("parameter `{k}` must list its values, got {other}"))),
            }
        }
        Ok(axes)
    }

    pub fn point_count(&self) -> Result<usize> {
        let axes = self.axes()?;
        if axes.is_empty() {
            return Ok(0);
        }
        axes.iter().try_fold(1usize, |acc, (_, v)| acc.checked_mul(v.len())).ok_or_else(|| {
            CliError::Schema("sweep grid size overflows".into())
        })
    }

    fn validate(&self) -> Result<()> {
        let count = self.point_count()?;
        ensure(count > 0, || "the sweep grid is empty".into())?;
        ensure(count <= MAX_SWEEP_POINTS, || format!("the sweep grid has {count} points, at most {MAX_SWEEP_POINTS} allowed"))?;
        match self.base.get("kind") {
            Some(toml::Value::String(k)) if k == "sweep" => Err(CliError::Schema("sweeps cannot be nested".into())),
            Some(toml::Value::String(_)) => Ok(()),
            _ => Err(CliError::Schema("base.kind must name the swept experiment".into())),
        }
    }
}

/// Sets the value at a dotted key path, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Schema(format!("bad key path `{path}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::Schema(format!("`{p}` in `{path}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
