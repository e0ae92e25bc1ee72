//! Numerical workbench for effective coefficients of random checkerboard
//! conductance fields, including fields with heavy-tailed (unbounded)
//! ellipticity.
//!
//! The crate is organized bottom-up:
//!
//! * [`matrix`]: small symmetric 1x1 / 2x2 matrices and their spectra.
//! * [`quad`]: adaptive 1-d quadrature for moments of marginal laws.
//! * [`field`]: marginal laws, triadic cubes, deterministic seeding and the
//!   sampled checkerboard coefficient field.
//! * [`sparse`]: CSR matrices and a Jacobi-preconditioned conjugate gradient
//!   solver (plain and nullspace-deflated).
//! * [`grid`]: multilinear finite elements on axis-aligned boxes with exact
//!   integer geometry, assembly and boundary-value solvers.
//! * [`cell`]: the subadditive cell quantities, their duals, the defect
//!   functional and the effective-matrix extractors.
//! * [`norms`]: normalized Lebesgue/Sobolev norms, discrete dual norms and
//!   the multiscale decomposition of spatial averages.
//! * [`stats`]: Monte Carlo studies across scales, effective-coefficient
//!   estimation, fluctuation diagnostics and tail-truncation profiles.
//! * [`dirichlet`]: oscillating-coefficient boundary value problems, the
//!   two-scale expansion and the error-vs-scale experiment.
//! * [`cli`]: the command line front end.

pub mod cell;
pub mod cli;
pub mod dirichlet;
pub mod field;
pub mod grid;
pub mod matrix;
pub mod norms;
pub mod stats;
pub mod quad;
pub mod sparse;

/// Entry point for the `homog` binary; returns the process exit code.
pub fn run() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    cli::run_with(&args)
}
