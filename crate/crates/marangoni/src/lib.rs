//! Material point method for free-surface flow where surface tension matters
//! and may vary along the surface (thermocapillary / Marangoni effects,
//! temperature-dependent wetting, melting and freezing).
//!
//! The engine reconstructs an explicit surface every step (union-of-spheres
//! level set + marching squares/cubes), places quadrature samples on it, and
//! treats those samples as temporary material points: each interior particle
//! that owns samples is conservatively split so the surface carries real mass
//! during the grid solve, then merged back so no momentum is created or lost.
//! Surface energy is integrated with area-weighted normals, so gradients of
//! the surface-tension coefficient produce tangential (Marangoni) forces.
//!
//! Layout:
//! - [`kernels`]: B-spline stencils, polar SVD, area-weighted-normal algebra
//! - [`state`]: particles, grid, materials, seeding
//! - [`surface`]: level set, isocontouring, surface sampling, wetting
//! - [`resample`]: conservative split / merge of surface samples
//! - [`transfer`]: APIC grid transfers, strain update, advection
//! - [`energy`]: discrete energy, forces, Hessian blocks
//! - [`solve_momentum`]: explicit + Newton-Krylov implicit grid solves
//! - [`solve_thermal`]: implicit heat solve, Robin boundaries, phase change
//! - [`driver`]: scene config, the per-step pipeline, output writers

pub mod driver;
pub mod energy;
pub mod kernels;
mod mc_tables;
pub mod par;
pub mod resample;
pub mod rng;
pub mod solve_momentum;
pub mod solve_thermal;
pub mod state;
pub mod surface;
pub mod transfer;

use thiserror::Error;

/// Crate-wide error type. Simulation code fails loudly: out-of-domain
/// particles, singular configurations and non-converging solves are
/// reported with enough context to reproduce them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} at {position:?} is outside the valid grid interior")]
    OutOfDomain { what: String, position: Vec<f64> },

    #[error("singular configuration in {what}: det = {det:e}")]
    Singular { what: String, det: f64 },

    #[error("Newton solve failed at t = {time}: {reason}")]
    SolveFailed { time: f64, reason: String },

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Determinant threshold below which a deformation gradient is treated as
/// singular (hard error in surface energy, clamp target for liquid J).
pub const EPS_J: f64 = 1e-10;
