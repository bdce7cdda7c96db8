//! Fixtures shared by the benchmarks.

use std::f64::consts::PI;

use fkvi_core::{
    ConvexFunction, Driver, DriverConstants, LevelSetDomain, Problem, SdeCoefficients, SolverOptions,
    TerminalCondition, TimeGrid,
};

/// Obstacle problem on `[-1, 1]`: unit Brownian motion, `F = -0.5`, `G = 0.3`,
/// `Y >= 0`, `kappa = (1 + cos(pi x)) / 4`.
pub fn obstacle_problem(steps: usize) -> Problem {
    let k = DriverConstants { mu_f: 0.0, ell_f: 0.0, b_f: 1.0, mu_g: 0.0, b_g: 1.0 };
    Problem {
        domain: LevelSetDomain::interval(-1.0, 1.0).expect("valid interval"),
        coeffs: SdeCoefficients::brownian(1, 1.0),
        driver: Driver::new(1, 1, |_, _, _, _, out| out[0] = -0.5, |_, _, _, out| out[0] = 0.3, k),
        phi: ConvexFunction::IndicatorAtLeast { a: 0.0 },
        psi: ConvexFunction::zero(1),
        kappa: TerminalCondition::new(1, |x, out| out[0] = 0.25 * (1.0 + (PI * x[0]).cos())),
        grid: TimeGrid::uniform(0.5, steps).expect("valid grid"),
        options: SolverOptions::default(),
    }
}

pub fn unit_disc() -> LevelSetDomain {
    LevelSetDomain::ball(vec![0.0, 0.0], 1.0).expect("valid ball")
}
