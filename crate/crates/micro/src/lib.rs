//! Microscopic particle systems whose hydrodynamic limits are the nonlinear
//! diffusions of `relent-core`: the zero range process (one or two species,
//! closed, periodic, reservoir-driven or weakly asymmetric) and
//! Ginzburg-Landau dynamics, with their one-site invariant measures and
//! Lyapunov statistics of the large-deviation functionals.

pub mod error;
pub mod gl;
pub mod monitor;
pub mod site;
pub mod tree;
pub mod zrp;

pub use error::{MicroError, Result};
pub use site::{conductivity, fugacity_from_density, legendre_check, sample_product_measure, RateFn, SiteMeasure};
pub use zrp::{simulate_zrp, Configuration, Species, ZrpBoundary, ZrpModel, ZrpOptions, ZrpRun};
