//! Reflected SDE simulation by projected Euler steps.
//!
//! Each step moves `X_k` by the Euler increment and projects the result back
//! onto the closure of the domain; the projection distance is the increment
//! of the boundary local time `A`. The push direction is `-grad phi` at the
//! projected point, so `X + int grad phi dA` reproduces the unconstrained
//! Euler sum.

mod export;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure_finite, Error, Result};
use crate::geometry::{LevelSetDomain, PointClass};
use crate::rng::{uniform_stream, CounterNormals, IncrementSource};

pub use export::{read_binary, write_binary, write_csv, BUNDLE_MAGIC};

const MODULE: &str = "forward";

/// `(t, x, out)`; writes a vector (drift) or a row-major `d x k` matrix
/// (diffusion) into `out`.
pub type TimeField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct SdeCoefficients {
    pub dim: usize,
    /// Brownian dimension.
    pub k: usize,
    pub drift: TimeField,
    pub diffusion: TimeField,
    /// One-sided monotonicity constant of the drift.
    pub mu_f: f64,
    /// Lipschitz constant of the diffusion.
    pub ell_g: f64,
}

impl fmt::Debug for SdeCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeCoefficients")
            .field("dim", &self.dim)
            .field("k", &self.k)
            .field("mu_f", &self.mu_f)
            .field("ell_g", &self.ell_g)
            .finish_non_exhaustive()
    }
}

impl SdeCoefficients {
    pub fn new(
        dim: usize,
        k: usize,
        drift: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        mu_f: f64,
        ell_g: f64,
    ) -> Self {
        SdeCoefficients { dim, k, drift: Arc::new(drift), diffusion: Arc::new(diffusion), mu_f, ell_g }
    }

    /// Constant drift and diffusion.
    pub fn constant(drift: Vec<f64>, diffusion: Vec<f64>, k: usize) -> Self {
        let dim = drift.len();
        assert_eq!(diffusion.len(), dim * k, "diffusion must be d x k");
        SdeCoefficients::new(
            dim,
            k,
            move |_, _, out| out.copy_from_slice(&drift),
            move |_, _, out| out.copy_from_slice(&diffusion),
            0.0,
            1.0,
        )
    }

    /// Scaled Brownian motion `sigma * I` with `k = d`.
    pub fn brownian(dim: usize, sigma: f64) -> Self {
        let mut g = vec![0.0; dim * dim];
        for i in 0..dim {
            g[i * dim + i] = sigma;
        }
        Self::constant(vec![0.0; dim], g, dim)
    }

    fn validate(&self, domain: &LevelSetDomain) -> Result<()> {
        if self.dim != domain.dim() || self.k == 0 {
            return Err(Error::invalid_input(MODULE, format!(
                "coefficients have d={} k={}, domain has d={}",
                self.dim, self.k, domain.dim()
            )));
        }
        if !(self.ell_g > 0.0) || !self.mu_f.is_finite() {
            return Err(Error::invalid_model(MODULE, "need finite mu_f and ell_g > 0"));
        }
        Ok(())
    }

    /// Sampled check of the monotonicity of `f` and the Lipschitz bound of
    /// `g` on the closure of `domain`. Returns the worst margins
    /// `(mu_f |u-v|^2 - <u-v, f(u)-f(v)>, ell_g |u-v| - |g(u)-g(v)|)` with
    /// their witnesses.
    pub fn check_structure(&self, domain: &LevelSetDomain, horizon: f64, samples: usize, seed: u64) -> Result<StructureReport> {
        self.validate(domain)?;
        let mut rng = uniform_stream(seed, 1);
        let (d, k) = (self.dim, self.k);
        let (mut fu, mut fv) = (vec![0.0; d], vec![0.0; d]);
        let (mut gu, mut gv) = (vec![0.0; d * k], vec![0.0; d * k]);
        let mut report = StructureReport::default();
        for _ in 0..samples {
            let t = rng.random_range(0.0..=horizon);
            let u = crate::convex::sample_closure(domain, &mut rng);
            let v = crate::convex::sample_closure(domain, &mut rng);
            (self.drift)(t, &u, &mut fu);
            (self.drift)(t, &v, &mut fv);
            (self.diffusion)(t, &u, &mut gu);
            (self.diffusion)(t, &v, &mut gv);
            let du2: f64 = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            let inner: f64 = (0..d).map(|i| (u[i] - v[i]) * (fu[i] - fv[i])).sum();
            let gdiff: f64 = gu.iter().zip(&gv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let m1 = self.mu_f * du2 - inner;
            let m2 = self.ell_g * du2.sqrt() - gdiff;
            if m1 < report.monotonicity_margin {
                report.monotonicity_margin = m1;
                report.monotonicity_witness = format!("t={t} u={u:?} v={v:?}");
            }
            if m2 < report.lipschitz_margin {
                report.lipschitz_margin = m2;
                report.lipschitz_witness = format!("t={t} u={u:?} v={v:?}");
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructureReport {
    pub monotonicity_margin: f64,
    pub monotonicity_witness: String,
    pub lipschitz_margin: f64,
    pub lipschitz_witness: String,
}

impl Default for StructureReport {
    fn default() -> Self {
        StructureReport {
            monotonicity_margin: f64::INFINITY,
            monotonicity_witness: String::new(),
            lipschitz_margin: f64::INFINITY,
            lipschitz_witness: String::new(),
        }
    }
}

impl StructureReport {
    pub fn pass(&self, slack: f64) -> bool {
        self.monotonicity_margin >= -slack && self.lipschitz_margin >= -slack
    }
}

/// Uniform grid `r_i = i T / N` with `r_N = T` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) || steps == 0 {
            return Err(Error::invalid_input(MODULE, format!("grid needs T > 0 and N >= 1, got T={horizon} N={steps}")));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i >= self.steps {
            self.horizon
        } else {
            self.horizon * i as f64 / self.steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }

    /// Nearest node `<= t` and the snap distance `t - r_i`.
    pub fn start_index_of(&self, t: f64) -> Result<(usize, f64)> {
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(Error::invalid_input(MODULE, format!("start time {t} outside [0, {}]", self.horizon)));
        }
        let raw = t / self.dt();
        // absorb rounding when t is a node up to a few ulps
        let mut i = (raw + 1e-9).floor() as usize;
        i = i.min(self.steps);
        while i > 0 && self.node(i) > t + 1e-12 * self.horizon {
            i -= 1;
        }
        Ok((i, (t - self.node(i)).max(0.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ReflectionScheme {
    /// Euler step followed by the closest-point projection.
    Projection,
    /// Euler step with the penalty push `-(dt / eps) phi^+ grad phi`. Paths
    /// may leave the closure by `O(eps)`; for cross-checks only.
    Penalization { eps: f64 },
}

/// Monte Carlo ensemble of reflected paths. Arrays are path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectedPathBundle {
    pub grid: TimeGrid,
    pub paths: usize,
    pub dim: usize,
    pub k: usize,
    pub t_start: f64,
    pub start_index: usize,
    /// `t_start - r_{start_index}`.
    pub snap: f64,
    pub x_start: Vec<f64>,
    /// `paths x (N+1) x d`.
    pub x: Vec<f64>,
    /// `paths x (N+1)`.
    pub a: Vec<f64>,
    /// `paths x N x k`; zero on steps before the start index.
    pub db: Vec<f64>,
    /// `paths x (N+1)`.
    pub boundary: Vec<bool>,
    pub seed: u64,
    pub scheme: ReflectionScheme,
}

impl ReflectedPathBundle {
    pub fn nodes(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn x_at(&self, path: usize, node: usize) -> &[f64] {
        let o = (path * self.nodes() + node) * self.dim;
        &self.x[o..o + self.dim]
    }

    pub fn a_at(&self, path: usize, node: usize) -> f64 {
        self.a[path * self.nodes() + node]
    }

    /// Local-time increment over step `s`.
    pub fn da(&self, path: usize, step: usize) -> f64 {
        self.a_at(path, step + 1) - self.a_at(path, step)
    }

    pub fn db_at(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.grid.steps() + step) * self.k;
        &self.db[o..o + self.k]
    }

    pub fn on_boundary(&self, path: usize, node: usize) -> bool {
        self.boundary[path * self.nodes() + node]
    }

    /// Checks the structural invariants of a projection-scheme bundle.
    pub fn check_invariants(&self, domain: &LevelSetDomain) -> Result<()> {
        let n = self.nodes();
        for p in 0..self.paths {
            for i in 0..n {
                let x = self.x_at(p, i);
                if i <= self.start_index && x != self.x_start.as_slice() {
                    return Err(Error::numeric(MODULE, format!("path {p} node {i}: X differs from start before t")));
                }
                if matches!(self.scheme, ReflectionScheme::Projection) && !domain.contains_closure(x) {
                    return Err(Error::numeric(MODULE, format!("path {p} node {i}: X outside closure")));
                }
                let a = self.a_at(p, i);
                if i <= self.start_index && a != 0.0 {
                    return Err(Error::numeric(MODULE, format!("path {p} node {i}: A nonzero before t")));
                }
                if i > 0 {
                    let da = a - self.a_at(p, i - 1);
                    if da < 0.0 {
                        return Err(Error::numeric(MODULE, format!("path {p} node {i}: A decreased")));
                    }
                    if da > 0.0 && !self.on_boundary(p, i) {
                        return Err(Error::numeric(MODULE, format!("path {p} node {i}: A increased off the boundary")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Projected Euler simulation with counter-based increments keyed on `seed`.
pub fn simulate_reflected(
    domain: &LevelSetDomain,
    coeffs: &SdeCoefficients,
    grid: &TimeGrid,
    t: f64,
    x: &[f64],
    paths: usize,
    seed: u64,
) -> Result<ReflectedPathBundle> {
    simulate_reflected_with(domain, coeffs, grid, t, x, paths, &CounterNormals::new(seed), ReflectionScheme::Projection)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_reflected_with(
    domain: &LevelSetDomain,
    coeffs: &SdeCoefficients,
    grid: &TimeGrid,
    t: f64,
    x: &[f64],
    paths: usize,
    source: &dyn IncrementSource,
    scheme: ReflectionScheme,
) -> Result<ReflectedPathBundle> {
    coeffs.validate(domain)?;
    ensure_finite(MODULE, "start point", x)?;
    if x.len() != domain.dim() {
        return Err(Error::invalid_input(MODULE, "start point dimension mismatch"));
    }
    if !domain.contains_closure(x) {
        return Err(Error::invalid_input(MODULE, format!("start point {x:?} outside the closure of the domain")));
    }
    if paths == 0 {
        return Err(Error::invalid_input(MODULE, "need at least one path"));
    }
    if let ReflectionScheme::Penalization { eps } = scheme {
        if !(eps > 0.0) {
            return Err(Error::invalid_input(MODULE, "penalization parameter must be positive"));
        }
    }
    let (start, snap) = grid.start_index_of(t)?;
    let (d, k, n) = (coeffs.dim, coeffs.k, grid.steps());
    let nodes = n + 1;
    let dt = grid.dt();

    let mut xs = vec![0.0; paths * nodes * d];
    let mut a = vec![0.0; paths * nodes];
    let mut db = vec![0.0; paths * n * k];
    let mut flags = vec![false; paths * nodes];
    let start_flag = domain.classify_unchecked(x) == PointClass::Boundary;

    xs.par_chunks_mut(nodes * d)
        .zip(a.par_chunks_mut(nodes))
        .zip(db.par_chunks_mut(n * k))
        .zip(flags.par_chunks_mut(nodes))
        .enumerate()
        .try_for_each(|(p, (((xp, ap), dbp), fp))| -> Result<()> {
            source.fill(p as u64, grid, k, dbp);
            dbp[..start * k].iter_mut().for_each(|v| *v = 0.0);
            for i in 0..=start {
                xp[i * d..(i + 1) * d].copy_from_slice(x);
                fp[i] = start_flag;
            }
            let mut f = vec![0.0; d];
            let mut g = vec![0.0; d * k];
            let mut grad = vec![0.0; d];
            for s in start..n {
                let r = grid.node(s);
                let (cur, next) = xp.split_at_mut((s + 1) * d);
                let xk = &cur[s * d..];
                let xn = &mut next[..d];
                (coeffs.drift)(r, xk, &mut f);
                (coeffs.diffusion)(r, xk, &mut g);
                let dbs = &dbp[s * k..(s + 1) * k];
                for i in 0..d {
                    let noise: f64 = (0..k).map(|j| g[i * k + j] * dbs[j]).sum();
                    xn[i] = xk[i] + f[i] * dt + noise;
                }
                let da = match scheme {
                    ReflectionScheme::Projection => domain.project_in_place(xn).map_err(|e| {
                        Error::numeric(MODULE, format!("path {p} step {s}: {e}"))
                    })?,
                    ReflectionScheme::Penalization { eps } => {
                        let excess = domain.phi(xn).max(0.0);
                        if excess > 0.0 {
                            domain.grad_into(xn, &mut grad);
                            let push = dt / eps * excess;
                            for i in 0..d {
                                xn[i] -= push * grad[i];
                            }
                            push
                        } else {
                            0.0
                        }
                    }
                };
                if xn.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(MODULE, format!("path {p} step {s}: non-finite state")));
                }
                ap[s + 1] = ap[s] + da;
                fp[s + 1] = match scheme {
                    ReflectionScheme::Projection => domain.classify_unchecked(xn) == PointClass::Boundary,
                    ReflectionScheme::Penalization { .. } => da > 0.0 || domain.classify_unchecked(xn) != PointClass::Interior,
                };
            }
            Ok(())
        })?;

    Ok(ReflectedPathBundle {
        grid: *grid,
        paths,
        dim: d,
        k,
        t_start: t,
        start_index: start,
        snap,
        x_start: x.to_vec(),
        x: xs,
        a,
        db,
        boundary: flags,
        seed: source.seed(),
        scheme,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityResidual {
    pub rms: f64,
    pub max_abs: f64,
}

/// Per-path discrete residual of the local-time identity at `s = T`:
/// `A_T - [sum L phi(X_k) dt + sum <grad phi(X_k), g dB_k> - (phi(X_T) - phi(x))]`.
pub fn local_time_identity_residual(
    domain: &LevelSetDomain,
    coeffs: &SdeCoefficients,
    bundle: &ReflectedPathBundle,
) -> IdentityResidual {
    let residuals = identity_residuals(domain, coeffs, bundle);
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    let max_abs = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    IdentityResidual { rms, max_abs }
}

pub fn identity_residuals(domain: &LevelSetDomain, coeffs: &SdeCoefficients, bundle: &ReflectedPathBundle) -> Vec<f64> {
    let (d, k, n) = (bundle.dim, bundle.k, bundle.grid.steps());
    let dt = bundle.grid.dt();
    let phi0 = domain.phi(&bundle.x_start);
    (0..bundle.paths)
        .into_par_iter()
        .map(|p| {
            let mut f = vec![0.0; d];
            let mut g = vec![0.0; d * k];
            let mut grad = vec![0.0; d];
            let mut hess = vec![0.0; d * d];
            let mut drift_sum = 0.0;
            let mut mart_sum = 0.0;
            for s in bundle.start_index..n {
                let r = bundle.grid.node(s);
                let xk = bundle.x_at(p, s);
                (coeffs.drift)(r, xk, &mut f);
                (coeffs.diffusion)(r, xk, &mut g);
                domain.grad_into(xk, &mut grad);
                domain.hess_into(xk, &mut hess);
                drift_sum += generator_applied(&f, &g, &grad, &hess, d, k) * dt;
                let dbs = bundle.db_at(p, s);
                for i in 0..d {
                    let gdb: f64 = (0..k).map(|j| g[i * k + j] * dbs[j]).sum();
                    mart_sum += grad[i] * gdb;
                }
            }
            let phi_t = domain.phi(bundle.x_at(p, n));
            bundle.a_at(p, n) - (drift_sum + mart_sum - (phi_t - phi0))
        })
        .collect()
}

/// `(1/2) Tr(g g^T H) + <f, grad>` for row-major `g` (`d x k`) and `H` (`d x d`).
pub fn generator_applied(f: &[f64], g: &[f64], grad: &[f64], hess: &[f64], d: usize, k: usize) -> f64 {
    let mut trace = 0.0;
    for i in 0..d {
        for j in 0..d {
            let ggt: f64 = (0..k).map(|l| g[i * k + l] * g[j * k + l]).sum();
            trace += ggt * hess[j * d + i];
        }
    }
    0.5 * trace + f.iter().zip(grad).map(|(a, b)| a * b).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowDistance {
    /// Empirical `E sup_k |X_k - X'_k|^2`.
    pub e_x: f64,
    /// Empirical `E sup_k |A_k - A'_k|^2`.
    pub e_a: f64,
}

/// Distance between two bundles driven by the same noise.
pub fn bundle_distance(a: &ReflectedPathBundle, b: &ReflectedPathBundle) -> Result<FlowDistance> {
    if a.grid != b.grid || a.paths != b.paths || a.dim != b.dim || a.k != b.k {
        return Err(Error::invalid_input(MODULE, "bundles live on different grids or ensembles"));
    }
    if a.seed != b.seed {
        return Err(Error::invalid_input(MODULE, "bundles are not coupled (different seeds)"));
    }
    let nodes = a.nodes();
    let per_path: Vec<(f64, f64)> = (0..a.paths)
        .into_par_iter()
        .map(|p| {
            let mut sx = 0.0f64;
            let mut sa = 0.0f64;
            for i in 0..nodes {
                let dx: f64 = a.x_at(p, i).iter().zip(b.x_at(p, i)).map(|(u, v)| (u - v) * (u - v)).sum();
                sx = sx.max(dx);
                let da = a.a_at(p, i) - b.a_at(p, i);
                sa = sa.max(da * da);
            }
            (sx, sa)
        })
        .collect();
    let n = a.paths as f64;
    Ok(FlowDistance {
        e_x: per_path.iter().map(|v| v.0).sum::<f64>() / n,
        e_a: per_path.iter().map(|v| v.1).sum::<f64>() / n,
    })
}

/// Simulates both start points with shared increments and compares the flows.
#[allow(clippy::too_many_arguments)]
pub fn coupled_flow_distance(
    domain: &LevelSetDomain,
    coeffs: &SdeCoefficients,
    grid: &TimeGrid,
    first: (f64, &[f64]),
    second: (f64, &[f64]),
    paths: usize,
    seed: u64,
) -> Result<FlowDistance> {
    let a = simulate_reflected(domain, coeffs, grid, first.0, first.1, paths, seed)?;
    let b = simulate_reflected(domain, coeffs, grid, second.0, second.1, paths, seed)?;
    bundle_distance(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub std_err: f64,
    /// Set when the estimate overflowed `f64`; `mean` is then `+inf`.
    pub overflow: bool,
}

/// Empirical `E exp(lambda A_T)`.
pub fn exp_moment_estimate(bundle: &ReflectedPathBundle, lambda: f64) -> Result<MomentEstimate> {
    if !lambda.is_finite() {
        return Err(Error::invalid_input(MODULE, "lambda must be finite"));
    }
    let n = bundle.grid.steps();
    let exps: Vec<f64> = (0..bundle.paths).map(|p| lambda * bundle.a_at(p, n)).collect();
    let shift = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = exps.iter().map(|e| (e - shift).exp()).collect();
    let m = bundle.paths as f64;
    let mean_s = scaled.iter().sum::<f64>() / m;
    let var_s = if bundle.paths > 1 {
        scaled.iter().map(|v| (v - mean_s) * (v - mean_s)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let factor = shift.exp();
    let mean = mean_s * factor;
    let std_err = (var_s / m).sqrt() * factor;
    let overflow = !mean.is_finite();
    Ok(MomentEstimate {
        mean: if overflow { f64::INFINITY } else { mean },
        std_err: if overflow { f64::INFINITY } else { std_err },
        overflow,
    })
}

impl ReflectedPathBundle {
    /// The same paths restricted to the first `steps` steps, on the grid with
    /// horizon `steps * dt`. Increments and states are shared exactly.
    pub fn prefix(&self, steps: usize) -> Result<ReflectedPathBundle> {
        let n = self.grid.steps();
        if steps == 0 || steps > n || steps < self.start_index {
            return Err(Error::invalid_input(MODULE, format!("prefix of {steps} steps from a {n}-step bundle")));
        }
        let grid = TimeGrid::uniform(self.grid.dt() * steps as f64, steps)?;
        let (nodes, new_nodes) = (n + 1, steps + 1);
        let mut out = ReflectedPathBundle {
            grid,
            x: Vec::with_capacity(self.paths * new_nodes * self.dim),
            a: Vec::with_capacity(self.paths * new_nodes),
            db: Vec::with_capacity(self.paths * steps * self.k),
            boundary: Vec::with_capacity(self.paths * new_nodes),
            x_start: self.x_start.clone(),
            ..*self
        };
        for p in 0..self.paths {
            out.x.extend_from_slice(&self.x[p * nodes * self.dim..(p * nodes + new_nodes) * self.dim]);
            out.a.extend_from_slice(&self.a[p * nodes..p * nodes + new_nodes]);
            out.db.extend_from_slice(&self.db[p * n * self.k..(p * n + steps) * self.k]);
            out.boundary.extend_from_slice(&self.boundary[p * nodes..p * nodes + new_nodes]);
        }
        Ok(out)
    }
}
