use serde::Serialize;

use super::residuals::GridFunction;
use super::MODULE;
use crate::error::{Error, Result};
use crate::problem::Problem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdOptions {
    /// Spatial nodes including both endpoints.
    pub space_nodes: usize,
    pub time_steps: usize,
    pub picard_sweeps: usize,
    /// Largest last-sweep change accepted, relative to `1 + max |u|`.
    pub picard_tol: f64,
    /// Replace the first Crank-Nicolson step by two backward Euler half steps.
    pub rannacher: bool,
}

impl FdOptions {
    pub fn new(space_nodes: usize, time_steps: usize) -> Self {
        FdOptions { space_nodes, time_steps, picard_sweeps: 3, picard_tol: 1e-4, rannacher: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdGridSolution {
    pub grid: GridFunction,
    pub options: FdOptions,
    /// Largest last-sweep Picard change over all levels.
    pub picard_change: f64,
    /// One-sided Robin defect `|du/dn - G|` at `t = 0`.
    pub robin_residual: f64,
    /// Largest defect over all levels; large when `kappa` itself violates
    /// the boundary condition.
    pub robin_max: f64,
    /// `phi` was applied by a proximal step at each level.
    pub projected: bool,
}

impl FdGridSolution {
    /// Linear interpolation in `x` at the time node nearest to `t`.
    pub fn value_at(&self, t: f64, x: f64) -> f64 {
        self.grid.interpolate(t, x)
    }
}

/// Crank-Nicolson solve of `u_t + (1/2) |g|^2 u_xx + f u_x + F(t, x, u, u_x g) = 0`
/// with `du/dn = G(t, x, u)` at both endpoints (ghost nodes) and
/// `u(T) = kappa`. Nonlinear terms are lagged and refined by Picard sweeps.
/// A nonzero `phi` is applied as a proximal step of weight `dt` per level;
/// `psi` must be zero.
pub fn fd_reference_parabolic_1d(problem: &Problem, opts: &FdOptions) -> Result<FdGridSolution> {
    if problem.domain.dim() != 1 || problem.m() != 1 {
        return Err(Error::invalid_input(MODULE, "the finite-difference reference needs d = m = 1"));
    }
    if problem.domain.kind() != "interval" {
        return Err(Error::invalid_input(MODULE, "the finite-difference reference needs an interval domain"));
    }
    if !problem.psi.is_zero() {
        return Err(Error::invalid_input(MODULE, "the finite-difference reference needs psi = 0"));
    }
    if opts.space_nodes < 3 || opts.time_steps == 0 || opts.picard_sweeps == 0 {
        return Err(Error::invalid_input(MODULE, "need >= 3 space nodes, >= 1 time step and >= 1 Picard sweep"));
    }
    let bb = problem.domain.bounding_box();
    let (a, b) = (bb.lo[0], bb.hi[0]);
    let nx = opts.space_nodes;
    let h = (b - a) / (nx - 1) as f64;
    let horizon = problem.grid.horizon();
    let nt = opts.time_steps;
    let dt = horizon / nt as f64;
    let xs: Vec<f64> = (0..nx).map(|j| if j == nx - 1 { b } else { a + j as f64 * h }).collect();
    let ts: Vec<f64> = (0..=nt).map(|i| if i == nt { horizon } else { i as f64 * dt }).collect();
    let k = problem.coeffs.k;
    let projected = !problem.phi.is_zero();

    // Coefficients of the linear operator at one time level.
    let coeff = |t: f64| -> (Vec<f64>, Vec<f64>) {
        let mut fbuf = [0.0];
        let mut gbuf = vec![0.0; k];
        let mut half_g2 = vec![0.0; nx];
        let mut drift = vec![0.0; nx];
        for j in 0..nx {
            (problem.coeffs.drift)(t, &xs[j..=j], &mut fbuf);
            (problem.coeffs.diffusion)(t, &xs[j..=j], &mut gbuf);
            drift[j] = fbuf[0];
            half_g2[j] = 0.5 * gbuf.iter().map(|v| v * v).sum::<f64>();
        }
        (half_g2, drift)
    };
    let g_row = |t: f64, x: f64| -> Vec<f64> {
        let mut gbuf = vec![0.0; k];
        (problem.coeffs.diffusion)(t, &[x], &mut gbuf);
        gbuf
    };
    // Tridiagonal rows (sub, diag, sup) of the discrete operator; the
    // boundary rows already contain the ghost-node reflection.
    let operator = |half_g2: &[f64], drift: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut lo = vec![0.0; nx];
        let mut di = vec![0.0; nx];
        let mut up = vec![0.0; nx];
        for j in 0..nx {
            let d2 = half_g2[j] / (h * h);
            if j == 0 {
                di[j] = -2.0 * d2;
                up[j] = 2.0 * d2;
            } else if j == nx - 1 {
                lo[j] = 2.0 * d2;
                di[j] = -2.0 * d2;
            } else {
                let d1 = drift[j] / (2.0 * h);
                lo[j] = d2 - d1;
                di[j] = -2.0 * d2;
                up[j] = d2 + d1;
            }
        }
        (lo, di, up)
    };
    // Source terms: F everywhere plus the ghost-node contribution of G.
    let source = |t: f64, u: &[f64], half_g2: &[f64], drift: &[f64]| -> Vec<f64> {
        let mut s = vec![0.0; nx];
        let mut out = [0.0];
        let mut gb = [0.0; 2];
        for (side, j) in [(0usize, 0usize), (1, nx - 1)] {
            problem.driver.eval_g(t, &xs[j..=j], &u[j..=j], &mut out);
            gb[side] = out[0];
        }
        for j in 0..nx {
            let ux = if j == 0 {
                -gb[0]
            } else if j == nx - 1 {
                gb[1]
            } else {
                (u[j + 1] - u[j - 1]) / (2.0 * h)
            };
            let z: Vec<f64> = g_row(t, xs[j]).iter().map(|g| ux * g).collect();
            problem.driver.eval_f(t, &xs[j..=j], &u[j..=j], &z, &mut out);
            s[j] = out[0];
        }
        s[0] += gb[0] * (2.0 * half_g2[0] / h - drift[0]);
        s[nx - 1] += gb[1] * (2.0 * half_g2[nx - 1] / h + drift[nx - 1]);
        s
    };

    let mut values = vec![0.0; (nt + 1) * nx];
    let mut out = [0.0];
    for j in 0..nx {
        problem.kappa.eval(&xs[j..=j], &mut out);
        values[nt * nx + j] = out[0];
    }
    // One theta-step from `t1` down to `t0`; returns the new level and the
    // last Picard change.
    let advance = |t0: f64, t1: f64, next: &[f64], theta: f64, level: usize| -> Result<(Vec<f64>, f64)> {
        let step = t1 - t0;
        let (hg_n, dr_n) = coeff(t1);
        let (lo_n, di_n, up_n) = operator(&hg_n, &dr_n);
        let s_next = source(t1, next, &hg_n, &dr_n);
        let (hg, dr) = coeff(t0);
        let (lo, di, up) = operator(&hg, &dr);
        let explicit = (1.0 - theta) * step;
        let mut rhs0 = vec![0.0; nx];
        for j in 0..nx {
            let mut lu = di_n[j] * next[j];
            if j > 0 {
                lu += lo_n[j] * next[j - 1];
            }
            if j + 1 < nx {
                lu += up_n[j] * next[j + 1];
            }
            rhs0[j] = next[j] + explicit * (lu + s_next[j]);
        }
        let implicit = theta * step;
        let sub: Vec<f64> = lo.iter().map(|v| -implicit * v).collect();
        let diag: Vec<f64> = di.iter().map(|v| 1.0 - implicit * v).collect();
        let sup: Vec<f64> = up.iter().map(|v| -implicit * v).collect();
        let mut cur = next.to_vec();
        let mut last_change = 0.0;
        for _ in 0..opts.picard_sweeps {
            let s_cur = source(t0, &cur, &hg, &dr);
            let rhs: Vec<f64> = rhs0.iter().zip(&s_cur).map(|(r, s)| r + implicit * s).collect();
            let mut new = thomas(&sub, &diag, &sup, &rhs)
                .ok_or_else(|| Error::numeric(MODULE, format!("singular tridiagonal system at time level {level}")))?;
            if projected {
                for v in new.iter_mut() {
                    problem.phi.prox_in_place(std::slice::from_mut(v), step)?;
                }
            }
            last_change = new.iter().zip(&cur).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            cur = new;
        }
        let scale = 1.0 + cur.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if !last_change.is_finite() || cur.iter().any(|v| !v.is_finite()) || last_change > opts.picard_tol * scale {
            return Err(Error::numeric(
                MODULE,
                format!("Picard iteration did not settle at time level {level}: last change {last_change:e}"),
            ));
        }
        Ok((cur, last_change))
    };

    let mut picard_change: f64 = 0.0;
    let mut robin_max: f64 = 0.0;
    for i in (0..nt).rev() {
        let next = values[(i + 1) * nx..(i + 2) * nx].to_vec();
        let (cur, change) = if i + 1 == nt && opts.rannacher {
            // two backward Euler half steps damp the oscillations Crank-Nicolson
            // keeps from terminal data that violates the boundary condition
            let mid_t = 0.5 * (ts[i] + ts[i + 1]);
            let (mid, c1) = advance(mid_t, ts[i + 1], &next, 1.0, i)?;
            let (cur, c2) = advance(ts[i], mid_t, &mid, 1.0, i)?;
            (cur, c1.max(c2))
        } else {
            advance(ts[i], ts[i + 1], &next, 0.5, i)?
        };
        picard_change = picard_change.max(change);
        robin_max = robin_max.max(robin_defect(problem, ts[i], &xs, &cur, h));
        values[i * nx..(i + 1) * nx].copy_from_slice(&cur);
    }
    let robin_residual = robin_defect(problem, ts[0], &xs, &values[..nx], h);
    Ok(FdGridSolution {
        grid: GridFunction { ts, xs, values },
        options: *opts,
        picard_change,
        robin_residual,
        robin_max,
        projected,
    })
}

/// One-sided second-order estimate of `du/dn - G` at both ends.
fn robin_defect(problem: &Problem, t: f64, xs: &[f64], u: &[f64], h: f64) -> f64 {
    let n = u.len();
    let mut out = [0.0];
    problem.driver.eval_g(t, &xs[..1], &u[..1], &mut out);
    let left = -(-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h) - out[0];
    problem.driver.eval_g(t, &xs[n - 1..], &u[n - 1..], &mut out);
    let right = (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * h) - out[0];
    left.abs().max(right.abs())
}

/// Solves a tridiagonal system; `None` on a zero pivot.
fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if piv == 0.0 {
        return None;
    }
    c[0] = sup[0] / piv;
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - sub[i] * c[i - 1];
        if piv == 0.0 || !piv.is_finite() {
            return None;
        }
        c[i] = sup[i] / piv;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / piv;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Some(x)
}
