use thiserror::Error;

/// Errors raised by the numerical modules of this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid diffusion matrix: {0}")]
    InvalidDiffusion(String),
    #[error("drift Peclet number {peclet:.3e} exceeds the bound {bound:.3e} in centered mode")]
    PecletExceeded { peclet: f64, bound: f64 },
    #[error("nonlinearity evaluated outside its domain at s = {0}")]
    OutsideDomain(f64),
    #[error("invalid nonlinearity: {0}")]
    InvalidNonlinearity(String),
    #[error("invalid convex generator: {0}")]
    InvalidGenerator(String),
    #[error("invalid density field: {0}")]
    InvalidDensity(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("singular linear system (pivot {pivot:.3e} at row {row}); is the interior disconnected from the clamped states?")]
    SingularSystem { row: usize, pivot: f64 },
    #[error("residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    ResidualTooLarge { residual: f64, tolerance: f64 },
    #[error("reference state is not stationary: residual {residual:.3e} > {tolerance:.3e}")]
    NotStationary { residual: f64, tolerance: f64 },
    #[error("reference measure is not reversible: detailed-balance residual {residual:.3e} > {tolerance:.3e}")]
    NotReversible { residual: f64, tolerance: f64 },
    #[error("degenerate stationary value {value:.3e} at cell {cell}")]
    DegenerateReference { cell: usize, value: f64 },
    #[error("quadrature did not converge: estimate {estimate:.6e}, error {error:.3e}")]
    Quadrature { estimate: f64, error: f64 },
    #[error("integrand is singular inside the integration range near s = {0}")]
    SingularIntegrand(f64),
    #[error("CFL condition violated: dt = {dt:.3e} > {limit:.3e}")]
    Cfl { dt: f64, limit: f64 },
    #[error("Newton iteration failed to converge at t = {time:.6e} (residual {residual:.3e})")]
    NewtonFailure { time: f64, residual: f64 },
    #[error("negative density {value:.3e} at cell {cell}, t = {time:.6e}")]
    NegativeDensity { cell: usize, value: f64, time: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("eigenvalue iteration did not converge after {0} iterations")]
    EigenNoConvergence(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("rate fit undefined: {0}")]
    FitUndefined(String),
    #[error("compatibility relation violated: mismatch {mismatch:.3e}")]
    Incompatible { mismatch: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
