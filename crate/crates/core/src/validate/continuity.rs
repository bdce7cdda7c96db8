use serde::{Deserialize, Serialize};

use super::MODULE;
use crate::backward::BsdeSolution;
use crate::error::{Error, Result};
use crate::problem::{start_value, Problem};

/// Points `(t_n, x_n) = (t + dt 2^-n, x + dx 2^-n)` for `n = 1..=levels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuitySequence {
    pub t: f64,
    pub x: Vec<f64>,
    #[serde(default)]
    pub dt: f64,
    #[serde(default)]
    pub dx: Vec<f64>,
    pub levels: usize,
}

impl ContinuitySequence {
    pub fn points(&self) -> Result<Vec<(usize, f64, Vec<f64>)>> {
        let dx = if self.dx.is_empty() { vec![0.0; self.x.len()] } else { self.dx.clone() };
        if dx.len() != self.x.len() {
            return Err(Error::invalid_input(MODULE, "dx and x have different dimensions"));
        }
        if self.levels == 0 {
            return Err(Error::invalid_input(MODULE, "the sequence needs at least one level"));
        }
        Ok((1..=self.levels)
            .map(|n| {
                let s = 0.5f64.powi(n as i32);
                (n, self.t + self.dt * s, self.x.iter().zip(&dx).map(|(a, b)| a + b * s).collect())
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityRow {
    pub n: usize,
    pub t_n: f64,
    pub x_n: Vec<f64>,
    /// Grid node the start time snapped to.
    pub start_index: usize,
    /// Empirical `E sup_r |Y^n_r - Y_r|^2`.
    pub e_n: f64,
    pub e_n_std_err: f64,
    /// `|u(t_n, x_n) - u(t, x)|`.
    pub du: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityReport {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub seed: u64,
    pub paths: usize,
    pub rows: Vec<ContinuityRow>,
    /// Target for the final `e_n`.
    pub target: f64,
    /// No `e_n` exceeds its predecessor by more than three standard errors.
    pub decreasing: bool,
    pub pass: bool,
}

fn sup_gap(a: &BsdeSolution, b: &BsdeSolution) -> (f64, f64) {
    let nodes = a.nodes();
    let per_path: Vec<f64> = (0..a.paths)
        .map(|p| {
            (0..nodes)
                .map(|i| a.y_at(p, i).iter().zip(b.y_at(p, i)).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
                .fold(0.0, f64::max)
        })
        .collect();
    let n = per_path.len() as f64;
    let mean = per_path.iter().sum::<f64>() / n;
    let var = if per_path.len() > 1 {
        per_path.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, (var / n).sqrt())
}

/// Solves at the base point and at every sequence point with the same seed,
/// so all bundles share their Brownian increments, and records
/// `e_n = E sup_r |Y^n_r - Y_r|^2` and `|u(t_n, x_n) - u(t, x)|`.
/// The verdict needs a decreasing trend (three standard errors of slack) and
/// a final `e_n` below `target`.
pub fn continuity_scan(
    problem: &Problem,
    seq: &ContinuitySequence,
    paths: usize,
    seed: u64,
    target: f64,
) -> Result<ContinuityReport> {
    let points = seq.points()?;
    for (_, t, x) in std::iter::once(&(0, seq.t, seq.x.clone())).chain(points.iter()) {
        if !(0.0..=problem.grid.horizon()).contains(t) || !problem.domain.contains_closure(x) {
            return Err(Error::invalid_input(MODULE, format!("sequence point ({t}, {x:?}) outside [0, T] x closure(D)")));
        }
    }
    let (base_bundle, base, _) = problem.run(seq.t, &seq.x, paths, seed)?;
    let u = start_value(&base_bundle, &base).u;
    let mut rows = Vec::with_capacity(points.len());
    for (n, t_n, x_n) in points {
        let (bundle, sol, value) = problem.run(t_n, &x_n, paths, seed)?;
        let (e_n, e_n_std_err) = sup_gap(&sol, &base);
        let du = value.u.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        rows.push(ContinuityRow { n, t_n, x_n, start_index: bundle.start_index, e_n, e_n_std_err, du });
    }
    let decreasing = rows
        .windows(2)
        .all(|w| w[1].e_n <= w[0].e_n + 3.0 * (w[0].e_n_std_err.powi(2) + w[1].e_n_std_err.powi(2)).sqrt());
    let last = rows.last().map(|r| r.e_n).unwrap_or(0.0);
    let pass = decreasing && last <= target;
    Ok(ContinuityReport { t: seq.t, x: seq.x.clone(), u, seed, paths, rows, target, decreasing, pass })
}
