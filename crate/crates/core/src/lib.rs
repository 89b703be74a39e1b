//! Geodesics of an optimal transport distance with a penalized source term.
//!
//! Densities and momenta are piecewise constant on a space-time tetrahedral
//! mesh, sources are continuous piecewise linear, and the constrained action
//! minimization is solved by Douglas-Rachford splitting between the action
//! and the indicator of discrete continuity-equation solutions.

pub mod assembly;
pub mod cli;
pub mod energy;
pub mod error;
pub mod io;
pub mod mesh;
pub mod prox;
pub mod solver;
pub mod spectral;

pub use assembly::{assemble_system, assemble_system_with, cg_solve, project_ce, BoundaryData, Preconditioner, SparseSystem};
pub use energy::{ce_residual, mass_balance_defect, source_energy, time_profiles, transport_energy, EnergyBreakdown};
pub use error::{Error, Result};
pub use mesh::{BoundaryCondition, P0Field, P1Field, SpaceTimeMesh, State};
pub use prox::{SourceKind, SourceModel};
pub use solver::{initialize, run, DrSolver, GeodesicResult, IterationStats, SolverConfig, Termination};
