//! Relative entropy and dual-entropy functionals for nonlinear
//! drift-diffusion equations and their discrete Markov counterparts.
//!
//! The crate discretizes `df/dt = div(A grad sigma(f) + E sigma(f))` on
//! uniform grids as a Markov generator acting on `sigma(f)`, computes
//! stationary states, integrates in time, and evaluates the convex
//! functionals `H_Phi` and `N_Psi` relative to the stationary state together
//! with their production rates and spectral decay certificates.

pub mod csv;
pub mod entropy;
pub mod error;
pub mod evolve;
pub mod generator;
pub mod linalg;
pub mod markov;
pub mod model;
pub mod quadrature;
pub mod spectral;
pub mod stationary;
pub mod systems;

pub use error::{Error, Result};
pub use generator::{assemble_from_grid, BoundaryCondition, DiscreteGenerator, DriftScheme};
pub use model::{
    make_uniform_grid, ConvexGenerator, DensityField, DiffusionSpec, FieldSpec, GeneratorKind, Grid, GridBuilder,
    Nonlinearity,
};
pub use stationary::{solve_stationary, StationaryOptions, StationaryState};
