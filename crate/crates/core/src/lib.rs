//! Reflected diffusions with boundary local time, backward stochastic
//! variational inequalities solved by proximal steps, and the resulting
//! representation `u(t, x) = Y_t^{t,x}` of parabolic and elliptic problems
//! with (possibly multivalued) Robin boundary conditions.

// `!(a > b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backward;
pub mod closed_form;
pub mod convex;
pub mod elliptic;
mod error;
pub mod forward;
pub mod geometry;
pub mod problem;
pub mod regression;
pub mod rng;
pub mod validate;

pub use backward::{
    extend_before_t, monotonicity_pairing, solve_bsvi, vi_residual, BsdeSolution, Driver, DriverConstants,
    DriverReport, Extension, SolverOptions, Splitting, TerminalCondition,
};
pub use convex::{check_compatibility, CompatConfig, CompatReport, ConditionResult, ConvexFunction, SmoothConvex};
pub use elliptic::{horizon_from_constant, horizon_for_tolerance, solve_elliptic, EllipticConfig, EllipticResult};
pub use error::{Error, Result};
pub use forward::{
    local_time_identity_residual, simulate_reflected, simulate_reflected_with, ReflectedPathBundle,
    ReflectionScheme, SdeCoefficients, TimeGrid,
};
pub use geometry::{BoundingBox, LevelSetDomain, PointClass};
pub use problem::{Problem, UValue};
pub use regression::{BasisKind, RegressionBasis};
pub use rng::{CounterNormals, IncrementSource};
pub use validate::{
    continuity_scan, fd_reference_parabolic_1d, pde_residuals, ContinuityReport, ContinuitySequence,
    FdGridSolution, FdOptions, GridFunction, ResidualReport,
};
