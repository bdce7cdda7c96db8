use rayon::prelude::*;
use serde::Serialize;

use super::MODULE;
use crate::convex::ConvexFunction;
use crate::error::{Error, Result};
use crate::problem::Problem;

/// Values `u(t_i, x_j)` on a tensor grid, time-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridFunction {
    pub ts: Vec<f64>,
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn from_fn(ts: Vec<f64>, xs: Vec<f64>, u: impl Fn(f64, f64) -> f64) -> Self {
        let values = ts.iter().flat_map(|&t| xs.iter().map(move |&x| (t, x))).map(|(t, x)| u(t, x)).collect();
        GridFunction { ts, xs, values }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.xs.len() + j]
    }

    /// Linear interpolation in `x` at the time node nearest to `t`.
    pub fn interpolate(&self, t: f64, x: f64) -> f64 {
        let i = nearest(&self.ts, t);
        let xs = &self.xs;
        let n = xs.len();
        if n == 1 || x <= xs[0] {
            return self.at(i, 0);
        }
        if x >= xs[n - 1] {
            return self.at(i, n - 1);
        }
        let j = xs.partition_point(|v| *v <= x).clamp(1, n - 1) - 1;
        let w = (x - xs[j]) / (xs[j + 1] - xs[j]);
        (1.0 - w) * self.at(i, j) + w * self.at(i, j + 1)
    }

    fn check(&self) -> Result<()> {
        if self.ts.len() < 5 || self.xs.len() < 5 {
            return Err(Error::invalid_input(
                MODULE,
                format!("grid too coarse for second differences: {} x {} nodes", self.ts.len(), self.xs.len()),
            ));
        }
        if self.values.len() != self.ts.len() * self.xs.len() {
            return Err(Error::invalid_input(MODULE, "grid values do not match the axes"));
        }
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if !increasing(&self.ts) || !increasing(&self.xs) {
            return Err(Error::invalid_input(MODULE, "grid axes must be strictly increasing"));
        }
        Ok(())
    }
}

fn nearest(v: &[f64], t: f64) -> usize {
    let mut best = 0;
    for (i, s) in v.iter().enumerate() {
        if (s - t).abs() < (v[best] - t).abs() {
            best = i;
        }
    }
    best
}

/// `u(t_i, x_j)` by Monte Carlo, one `evaluate_u` per node, all with the same
/// seed so neighbouring nodes share their noise.
pub fn sample_u_grid(problem: &Problem, ts: Vec<f64>, xs: Vec<f64>, paths: usize, seed: u64) -> Result<GridFunction> {
    if problem.domain.dim() != 1 || problem.m() != 1 {
        return Err(Error::invalid_input(MODULE, "grid sampling needs d = m = 1"));
    }
    let mut values = Vec::with_capacity(ts.len() * xs.len());
    for &t in &ts {
        for &x in &xs {
            values.push(problem.evaluate_u(t, &[x], paths, seed)?.u[0]);
        }
    }
    Ok(GridFunction { ts, xs, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ResidualStat {
    pub max_abs: f64,
    pub rms: f64,
    pub count: usize,
}

impl ResidualStat {
    fn from_values(v: impl Iterator<Item = f64>) -> Self {
        let (mut max_abs, mut sq, mut count) = (0.0f64, 0.0, 0usize);
        for r in v {
            max_abs = max_abs.max(r.abs());
            sq += r * r;
            count += 1;
        }
        let rms = if count > 0 { (sq / count as f64).sqrt() } else { 0.0 };
        ResidualStat { max_abs, rms, count }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualRow {
    pub t: f64,
    pub x: f64,
    pub boundary: bool,
    /// `p + Phi` inside, `Gamma` on the boundary.
    pub raw: f64,
    /// Distance of `raw` to the subdifferential interval at `u`, when the
    /// corresponding convex function is nonzero and the node is smooth.
    pub membership: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    /// `p + Phi(t, x, u, q, X)` at interior nodes.
    pub interior: ResidualStat,
    /// Smallest and largest signed interior residual.
    pub interior_range: (f64, f64),
    /// `Gamma(t, x, u, q)` at the two endpoints.
    pub boundary: ResidualStat,
    /// `dist(p + Phi, d phi(u))`, only for nonzero `phi`.
    pub membership: Option<ResidualStat>,
    /// `dist(Gamma, d psi(u))`, only for nonzero `psi`.
    pub boundary_membership: Option<ResidualStat>,
    /// Nodes left out of the membership check because their stencil mixes
    /// kink and non-kink values of `u`.
    pub excluded: usize,
    /// Nodes where `u` left `Dom(phi)` or `Dom(psi)`.
    pub outside_domain: usize,
    pub rows: Vec<ResidualRow>,
}

fn interval_distance(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if v < lo {
        lo - v
    } else if v > hi {
        v - hi
    } else {
        0.0
    }
}

fn is_kink(f: &ConvexFunction, y: f64) -> Option<bool> {
    f.subdifferential_1d(y).ok().map(|(lo, hi)| hi > lo)
}

/// Finite-difference residuals of a sampled `u` for a scalar problem on an
/// interval: central differences inside, second-order one-sided `u_x` at the
/// endpoints. Only interior time nodes are used.
pub fn pde_residuals(u: &GridFunction, problem: &Problem) -> Result<ResidualReport> {
    if problem.domain.dim() != 1 || problem.m() != 1 {
        return Err(Error::invalid_input(MODULE, "residuals are implemented for d = m = 1"));
    }
    u.check()?;
    let (nt, nx) = (u.ts.len(), u.xs.len());
    let k = problem.coeffs.k;
    let phi_on = !problem.phi.is_zero();
    let psi_on = !problem.psi.is_zero();

    let rows_per_level: Vec<Vec<(ResidualRow, bool, bool)>> = (1..nt - 1)
        .into_par_iter()
        .map(|i| {
            let t = u.ts[i];
            let dtm = t - u.ts[i - 1];
            let dtp = u.ts[i + 1] - t;
            let mut level = Vec::with_capacity(nx);
            let mut fbuf = [0.0];
            let mut gbuf = vec![0.0; k];
            let mut out = [0.0];
            for j in 0..nx {
                let x = u.xs[j];
                let y = u.at(i, j);
                // Time derivative, second order on non-uniform nodes.
                let p = (u.at(i + 1, j) * dtm * dtm - u.at(i - 1, j) * dtp * dtp - y * (dtm * dtm - dtp * dtp))
                    / (dtm * dtp * (dtm + dtp));
                if j == 0 || j == nx - 1 {
                    let (q, normal) = if j == 0 {
                        let (h1, h2) = (u.xs[1] - x, u.xs[2] - x);
                        (one_sided(y, u.at(i, 1), u.at(i, 2), h1, h2), -1.0)
                    } else {
                        let (h1, h2) = (x - u.xs[j - 1], x - u.xs[j - 2]);
                        (-one_sided(y, u.at(i, j - 1), u.at(i, j - 2), h1, h2), 1.0)
                    };
                    problem.driver.eval_g(t, &[x], &[y], &mut out);
                    let gamma = -normal * q + out[0];
                    let (membership, outside, excluded) = if psi_on {
                        match problem.psi.subdifferential_1d(y) {
                            Ok(iv) => (Some(interval_distance(gamma, iv)), false, false),
                            Err(_) => (None, true, false),
                        }
                    } else {
                        (None, false, false)
                    };
                    level.push((ResidualRow { t, x, boundary: true, raw: gamma, membership }, outside, excluded));
                    continue;
                }
                let (hm, hp) = (x - u.xs[j - 1], u.xs[j + 1] - x);
                let (ym, yp) = (u.at(i, j - 1), u.at(i, j + 1));
                let q = (yp * hm * hm - ym * hp * hp - y * (hm * hm - hp * hp)) / (hm * hp * (hm + hp));
                let xx = 2.0 * (hm * yp + hp * ym - (hm + hp) * y) / (hm * hp * (hm + hp));
                (problem.coeffs.drift)(t, &[x], &mut fbuf);
                (problem.coeffs.diffusion)(t, &[x], &mut gbuf);
                let half_g2 = 0.5 * gbuf.iter().map(|v| v * v).sum::<f64>();
                let z: Vec<f64> = gbuf.iter().map(|g| q * g).collect();
                problem.driver.eval_f(t, &[x], &[y], &z, &mut out);
                let raw = p + half_g2 * xx + fbuf[0] * q + out[0];
                let (membership, outside, excluded) = if phi_on {
                    let stencil = [y, ym, yp, u.at(i - 1, j), u.at(i + 1, j)];
                    let kinks: Option<Vec<bool>> = stencil.iter().map(|v| is_kink(&problem.phi, *v)).collect();
                    match kinks {
                        None => (None, true, false),
                        Some(ks) if ks.iter().any(|b| *b != ks[0]) => (None, false, true),
                        Some(_) => {
                            let iv = problem.phi.subdifferential_1d(y).expect("checked above");
                            (Some(interval_distance(raw, iv)), false, false)
                        }
                    }
                } else {
                    (None, false, false)
                };
                level.push((ResidualRow { t, x, boundary: false, raw, membership }, outside, excluded));
            }
            level
        })
        .collect();

    let flat: Vec<(ResidualRow, bool, bool)> = rows_per_level.into_iter().flatten().collect();
    let interior = ResidualStat::from_values(flat.iter().filter(|r| !r.0.boundary).map(|r| r.0.raw));
    let boundary = ResidualStat::from_values(flat.iter().filter(|r| r.0.boundary).map(|r| r.0.raw));
    let interior_range = flat
        .iter()
        .filter(|r| !r.0.boundary)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.0.raw), hi.max(r.0.raw)));
    let membership = phi_on.then(|| {
        ResidualStat::from_values(flat.iter().filter(|r| !r.0.boundary).filter_map(|r| r.0.membership))
    });
    let boundary_membership = psi_on.then(|| {
        ResidualStat::from_values(flat.iter().filter(|r| r.0.boundary).filter_map(|r| r.0.membership))
    });
    let excluded = flat.iter().filter(|r| r.2).count();
    let outside_domain = flat.iter().filter(|r| r.1).count();
    for v in [interior.max_abs, boundary.max_abs] {
        if !v.is_finite() {
            return Err(Error::numeric(MODULE, "non-finite residual"));
        }
    }
    Ok(ResidualReport {
        interior,
        interior_range,
        boundary,
        membership,
        boundary_membership,
        excluded,
        outside_domain,
        rows: flat.into_iter().map(|r| r.0).collect(),
    })
}

/// `u_x` at `x_0` from `u(x_0)`, `u(x_0 + h1)`, `u(x_0 + h2)`, second order.
fn one_sided(u0: f64, u1: f64, u2: f64, h1: f64, h2: f64) -> f64 {
    (u1 * h2 * h2 - u2 * h1 * h1 - u0 * (h2 * h2 - h1 * h1)) / (h1 * h2 * (h2 - h1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_sided_exact_on_quadratics() {
        let f = |x: f64| 1.0 + 2.0 * x - 3.0 * x * x;
        let d = one_sided(f(0.5), f(0.6), f(0.7), 0.1, 0.2);
        assert!((d - (2.0 - 6.0 * 0.5)).abs() < 1e-10);
        let d = -one_sided(f(0.5), f(0.4), f(0.3), 0.1, 0.2);
        assert!((d - (2.0 - 6.0 * 0.5)).abs() < 1e-10);
    }

    #[test]
    fn interpolation_and_coarse_grid() {
        let g = GridFunction::from_fn(vec![0.0, 1.0], vec![0.0, 1.0, 2.0], |t, x| t + x);
        assert_eq!(g.interpolate(0.9, 0.5), 1.5);
        assert_eq!(g.interpolate(0.0, 5.0), 2.0);
        assert!(g.check().is_err());
    }
}
