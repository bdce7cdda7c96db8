//! A complete forward-backward problem and the evaluation of
//! `u(t, x) = Y_t^{t,x}`.

use rayon::prelude::*;
use serde::Serialize;

use crate::backward::{solve_bsvi, BsdeSolution, Driver, SolverOptions, TerminalCondition};
use crate::convex::ConvexFunction;
use crate::error::{Error, Result};
use crate::forward::{simulate_reflected, ReflectedPathBundle, SdeCoefficients, TimeGrid};
use crate::geometry::LevelSetDomain;
use crate::rng::derive_seed;

const MODULE: &str = "backward";

#[derive(Debug, Clone)]
pub struct Problem {
    pub domain: LevelSetDomain,
    pub coeffs: SdeCoefficients,
    pub driver: Driver,
    pub phi: ConvexFunction,
    pub psi: ConvexFunction,
    pub kappa: TerminalCondition,
    pub grid: TimeGrid,
    pub options: SolverOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UValue {
    pub u: Vec<f64>,
    /// Cross-path standard deviation of `Y` one node after the start.
    pub std: Vec<f64>,
    /// Standard error of the mean, `std / sqrt(M)`.
    pub std_err: Vec<f64>,
    pub start_index: usize,
    pub snap: f64,
}

impl Problem {
    pub fn m(&self) -> usize {
        self.driver.m()
    }

    pub fn simulate(&self, t: f64, x: &[f64], paths: usize, seed: u64) -> Result<ReflectedPathBundle> {
        simulate_reflected(&self.domain, &self.coeffs, &self.grid, t, x, paths, seed)
    }

    pub fn solve_on(&self, bundle: &ReflectedPathBundle) -> Result<BsdeSolution> {
        solve_bsvi(bundle, &self.driver, &self.phi, &self.psi, &self.kappa, &self.options)
    }

    /// Simulates, solves, and returns the bundle, the solution and the start value.
    pub fn run(&self, t: f64, x: &[f64], paths: usize, seed: u64) -> Result<(ReflectedPathBundle, BsdeSolution, UValue)> {
        let bundle = self.simulate(t, x, paths, seed)?;
        let sol = self.solve_on(&bundle)?;
        let value = start_value(&bundle, &sol);
        Ok((bundle, sol, value))
    }

    pub fn evaluate_u(&self, t: f64, x: &[f64], paths: usize, seed: u64) -> Result<UValue> {
        Ok(self.run(t, x, paths, seed)?.2)
    }
}

/// `u` is the ensemble mean of `Y` at the start node. All paths share the
/// start state, so the spread there says nothing about Monte Carlo error;
/// `std` is taken one node later, over the regression targets that `u`
/// averages.
pub fn start_value(bundle: &ReflectedPathBundle, sol: &BsdeSolution) -> UValue {
    let (u, _) = sol.node_stats(sol.start_index);
    let (_, std) = sol.node_stats((sol.start_index + 1).min(sol.grid.steps()));
    let std_err = std.iter().map(|s| s / (sol.paths as f64).sqrt()).collect();
    UValue { u, std, std_err, start_index: sol.start_index, snap: bundle.snap }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkovRow {
    pub probe: f64,
    pub node: usize,
    /// Mean of `|Y_s - u(s, X_s)|` over the subsampled paths.
    pub discrepancy: f64,
    pub probes: usize,
}

/// Compares `Y_s` on the ensemble with fresh evaluations `u(s, X_s)` at the
/// first `subsample` paths, for every probe time `s`.
#[allow(clippy::too_many_arguments)]
pub fn markov_consistency(
    problem: &Problem,
    t: f64,
    x: &[f64],
    probe_times: &[f64],
    paths: usize,
    inner_paths: usize,
    subsample: usize,
    seed: u64,
) -> Result<Vec<MarkovRow>> {
    let (bundle, sol, _) = problem.run(t, x, paths, seed)?;
    let m = problem.m();
    let mut rows = Vec::with_capacity(probe_times.len());
    for (j, &s) in probe_times.iter().enumerate() {
        if s < t || s > problem.grid.horizon() {
            return Err(Error::invalid_input(MODULE, format!("probe time {s} outside [{t}, T]")));
        }
        let (node, _) = problem.grid.start_index_of(s)?;
        let node = node.max(bundle.start_index);
        let s_node = problem.grid.node(node);
        let count = subsample.min(paths).max(1);
        let diffs: Result<Vec<f64>> = (0..count)
            .into_par_iter()
            .map(|p| {
                let state = bundle.x_at(p, node);
                let fresh = problem.evaluate_u(s_node, state, inner_paths, derive_seed(seed, ((j as u64) << 32) | p as u64))?;
                let y = sol.y_at(p, node);
                Ok((0..m).map(|i| (y[i] - fresh.u[i]).abs()).sum::<f64>() / m as f64)
            })
            .collect();
        let diffs = diffs?;
        rows.push(MarkovRow { probe: s, node, discrepancy: diffs.iter().sum::<f64>() / count as f64, probes: count });
    }
    Ok(rows)
}

/// Empirical `E sup_r |Y_r|^2` over the whole grid.
pub fn sup_y_squared(sol: &BsdeSolution) -> f64 {
    let nodes = sol.nodes();
    let total: f64 = (0..sol.paths)
        .map(|p| (0..nodes).map(|i| sol.y_at(p, i).iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max))
        .sum();
    total / sol.paths as f64
}
