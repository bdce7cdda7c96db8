//! Reference solvers and empirical checks: a Crank-Nicolson solver for
//! scalar problems on an interval, the coupled-noise continuity scan and
//! finite-difference PDE residuals.

mod continuity;
mod fd;
mod residuals;

pub use continuity::{continuity_scan, ContinuityReport, ContinuityRow, ContinuitySequence};
pub use fd::{fd_reference_parabolic_1d, FdGridSolution, FdOptions};
pub use residuals::{pde_residuals, sample_u_grid, GridFunction, ResidualReport, ResidualRow, ResidualStat};

const MODULE: &str = "validate";
