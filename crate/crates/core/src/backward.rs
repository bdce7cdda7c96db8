//! Backward stochastic variational inequality on a simulated bundle.
//!
//! The sweep runs from the terminal node back to the start node. At each
//! step the conditional expectation `E[Y_{k+1} | X_k]` and the martingale
//! coefficient `Z_k` come from a regression on the cross-section; the
//! drivers are added explicitly in `dt` and in the pathwise local-time
//! increment, and the two subdifferential terms are resolved by proximal
//! steps with weights `dt` (for `phi`) and `dA_k` (for `psi`). Before the
//! start node the solution is continued by the deterministic proximal flow
//! with `A = 0`, `Z = 0`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex::ConvexFunction;
use crate::error::{Error, Result};
use crate::forward::{ReflectedPathBundle, TimeGrid};
use crate::geometry::LevelSetDomain;
use crate::regression::RegressionBasis;
use crate::rng::uniform_stream;

const MODULE: &str = "backward";

/// `F(t, x, y, z, out)` with `z` row-major `m x k`.
pub type DriverF = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `G(t, x, y, out)`.
pub type DriverG = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Interior driver `F`, boundary driver `G` and their structural constants.
#[derive(Clone)]
pub struct Driver {
    m: usize,
    k: usize,
    f: DriverF,
    g: DriverG,
    pub mu_f: f64,
    pub ell_f: f64,
    pub b_f: f64,
    pub mu_g: f64,
    pub b_g: f64,
    f_is_zero: bool,
    g_is_zero: bool,
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver")
            .field("m", &self.m)
            .field("k", &self.k)
            .field("mu_f", &self.mu_f)
            .field("ell_f", &self.ell_f)
            .field("b_f", &self.b_f)
            .field("mu_g", &self.mu_g)
            .field("b_g", &self.b_g)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverConstants {
    pub mu_f: f64,
    pub ell_f: f64,
    pub b_f: f64,
    pub mu_g: f64,
    pub b_g: f64,
}

impl Driver {
    pub fn new(
        m: usize,
        k: usize,
        f: impl Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        g: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        c: DriverConstants,
    ) -> Self {
        Driver {
            m,
            k,
            f: Arc::new(f),
            g: Arc::new(g),
            mu_f: c.mu_f,
            ell_f: c.ell_f,
            b_f: c.b_f,
            mu_g: c.mu_g,
            b_g: c.b_g,
            f_is_zero: false,
            g_is_zero: false,
        }
    }

    /// `F = 0`, `G = 0`.
    pub fn zero(m: usize, k: usize) -> Self {
        let mut d = Driver::new(
            m,
            k,
            |_, _, _, _, out| out.iter_mut().for_each(|v| *v = 0.0),
            |_, _, _, out| out.iter_mut().for_each(|v| *v = 0.0),
            DriverConstants { mu_f: 0.0, ell_f: 1.0, b_f: 1.0, mu_g: 0.0, b_g: 1.0 },
        );
        d.f_is_zero = true;
        d.g_is_zero = true;
        d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn constants(&self) -> DriverConstants {
        DriverConstants { mu_f: self.mu_f, ell_f: self.ell_f, b_f: self.b_f, mu_g: self.mu_g, b_g: self.b_g }
    }

    pub fn eval_f(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.f)(t, x, y, z, out)
    }

    pub fn eval_g(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.g)(t, x, y, out)
    }

    /// Default reporting weight `max(mu_F + ell_F^2, mu_G)`.
    pub fn default_lambda(&self) -> f64 {
        (self.mu_f + self.ell_f * self.ell_f).max(self.mu_g)
    }

    /// Sampled check of the five structural inequalities on
    /// `[0, T] x closure(D) x [-y_box, y_box]^m x` sphere of radius `z_box`.
    pub fn check_structure(
        &self,
        domain: &LevelSetDomain,
        horizon: f64,
        y_box: f64,
        z_box: f64,
        samples: usize,
        seed: u64,
    ) -> DriverReport {
        let (m, k) = (self.m, self.k);
        let mut rng = uniform_stream(seed, 2);
        let mut report = DriverReport::default();
        let (mut f1, mut f2, mut g1, mut g2) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let zero_z = vec![0.0; m * k];
        for _ in 0..samples {
            let t = rng.random_range(0.0..=horizon);
            let x = crate::convex::sample_closure(domain, &mut rng);
            let y: Vec<f64> = (0..m).map(|_| rng.random_range(-y_box..=y_box)).collect();
            let yt: Vec<f64> = (0..m).map(|_| rng.random_range(-y_box..=y_box)).collect();
            let z: Vec<f64> = (0..m * k).map(|_| rng.random_range(-z_box..=z_box)).collect();
            let zt: Vec<f64> = (0..m * k).map(|_| rng.random_range(-z_box..=z_box)).collect();
            let dy2: f64 = y.iter().zip(&yt).map(|(a, b)| (a - b) * (a - b)).sum();
            let dz: f64 = z.iter().zip(&zt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let witness = || format!("t={t} x={x:?} y={y:?} y~={yt:?} z={z:?} z~={zt:?}");

            self.eval_f(t, &x, &y, &z, &mut f1);
            self.eval_f(t, &x, &yt, &z, &mut f2);
            let inner: f64 = (0..m).map(|i| (y[i] - yt[i]) * (f1[i] - f2[i])).sum();
            report.record(0, self.mu_f * dy2 - inner, witness);

            self.eval_f(t, &x, &y, &zt, &mut f2);
            let df: f64 = f1.iter().zip(&f2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            report.record(1, self.ell_f * dz - df, witness);

            self.eval_f(t, &x, &y, &zero_z, &mut f2);
            report.record(2, self.b_f * (1.0 + ny) - f2.iter().map(|v| v * v).sum::<f64>().sqrt(), witness);

            self.eval_g(t, &x, &y, &mut g1);
            self.eval_g(t, &x, &yt, &mut g2);
            let inner_g: f64 = (0..m).map(|i| (y[i] - yt[i]) * (g1[i] - g2[i])).sum();
            report.record(3, self.mu_g * dy2 - inner_g, witness);
            report.record(4, self.b_g * (1.0 + ny) - g1.iter().map(|v| v * v).sum::<f64>().sqrt(), witness);
        }
        report
    }
}

/// Worst sampled margins of the driver conditions `(i)`-`(v)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriverReport {
    pub margins: [f64; 5],
    pub witnesses: [String; 5],
}

impl Default for DriverReport {
    fn default() -> Self {
        DriverReport { margins: [f64::INFINITY; 5], witnesses: Default::default() }
    }
}

impl DriverReport {
    fn record(&mut self, i: usize, margin: f64, witness: impl Fn() -> String) {
        let margin = if margin.is_nan() { f64::NEG_INFINITY } else { margin };
        if margin < self.margins[i] {
            self.margins[i] = margin;
            self.witnesses[i] = witness();
        }
    }

    pub fn pass(&self, slack: f64) -> bool {
        self.margins.iter().all(|m| *m >= -slack)
    }

    /// First violated condition, as `(label, margin, witness)`.
    pub fn first_violation(&self, slack: f64) -> Option<(&'static str, f64, &str)> {
        const LABELS: [&str; 5] = ["F monotone in y", "F Lipschitz in z", "F linear growth", "G monotone in y", "G linear growth"];
        (0..5).find(|&i| self.margins[i] < -slack).map(|i| (LABELS[i], self.margins[i], self.witnesses[i].as_str()))
    }
}

/// `kappa(x, out)`.
pub type TerminalFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Terminal data `kappa`.
#[derive(Clone)]
pub struct TerminalCondition {
    m: usize,
    kappa: TerminalFn,
}

impl fmt::Debug for TerminalCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TerminalCondition(m={})", self.m)
    }
}

impl TerminalCondition {
    pub fn new(m: usize, kappa: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        TerminalCondition { m, kappa: Arc::new(kappa) }
    }

    pub fn constant(c: Vec<f64>) -> Self {
        TerminalCondition::new(c.len(), move |_, out| out.copy_from_slice(&c))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.kappa)(x, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitting {
    /// `prox_psi(prox_phi(.))`.
    #[default]
    PhiFirst,
    PsiFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions {
    #[serde(default)]
    pub basis: RegressionBasis,
    #[serde(default = "default_picard")]
    pub picard_iters: usize,
    #[serde(default)]
    pub splitting: Splitting,
}

fn default_picard() -> usize {
    3
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { basis: RegressionBasis::default(), picard_iters: default_picard(), splitting: Splitting::PhiFirst }
    }
}

/// Ensemble solution. All arrays are path-major; step-indexed arrays have
/// `N` entries per path, node-indexed arrays `N + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub paths: usize,
    pub m: usize,
    pub k: usize,
    pub start_index: usize,
    pub seed: u64,
    pub splitting: Splitting,
    /// `paths x (N+1) x m`.
    pub y: Vec<f64>,
    /// `paths x N x (m k)`, row-major `m x k` per step.
    pub z: Vec<f64>,
    /// `U_r dr` increments, `paths x N x m`.
    pub du: Vec<f64>,
    /// `V_r dA_r` increments, `paths x N x m`.
    pub dv: Vec<f64>,
    /// Point at which `du` is a subgradient increment (output of the `phi` prox).
    pub y_phi: Vec<f64>,
    /// Point at which `dv` is a subgradient increment (output of the `psi` prox).
    pub y_psi: Vec<f64>,
    /// Measure weight of the `psi` term per step: `dA_k` after the start, `dt` before.
    pub psi_weight: Vec<f64>,
    /// Largest regression condition estimate over the sweep.
    pub max_condition: f64,
}

impl BsdeSolution {
    pub fn nodes(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn y_at(&self, path: usize, node: usize) -> &[f64] {
        let o = (path * self.nodes() + node) * self.m;
        &self.y[o..o + self.m]
    }

    pub fn z_at(&self, path: usize, step: usize) -> &[f64] {
        let w = self.m * self.k;
        let o = (path * self.grid.steps() + step) * w;
        &self.z[o..o + w]
    }

    fn step_slice<'a>(&self, arr: &'a [f64], path: usize, step: usize) -> &'a [f64] {
        let o = (path * self.grid.steps() + step) * self.m;
        &arr[o..o + self.m]
    }

    pub fn du_at(&self, path: usize, step: usize) -> &[f64] {
        self.step_slice(&self.du, path, step)
    }

    pub fn dv_at(&self, path: usize, step: usize) -> &[f64] {
        self.step_slice(&self.dv, path, step)
    }

    /// `K_s = sum_{r < s} (dU_r + dV_r)` at node `node`.
    pub fn k_at(&self, path: usize, node: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for s in 0..node {
            for ((o, u), v) in out.iter_mut().zip(self.du_at(path, s)).zip(self.dv_at(path, s)) {
                *o += u + v;
            }
        }
        out
    }

    /// Cross-path mean and standard deviation of `Y` at `node`.
    pub fn node_stats(&self, node: usize) -> (Vec<f64>, Vec<f64>) {
        let m = self.m;
        let n = self.paths as f64;
        let mut mean = vec![0.0; m];
        let mut sd = vec![0.0; m];
        for i in 0..m {
            let vals: Vec<f64> = (0..self.paths).map(|p| self.y_at(p, node)[i]).collect();
            let first = vals[0];
            let mu = first + crate::regression::ordered_sum(vals.iter().map(|v| v - first)) / n;
            let var = if self.paths > 1 {
                crate::regression::ordered_sum(vals.iter().map(|v| (v - mu) * (v - mu))) / (n - 1.0)
            } else {
                0.0
            };
            mean[i] = mu;
            sd[i] = var.sqrt();
        }
        (mean, sd)
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_prox(
    order: Splitting,
    phi: &ConvexFunction,
    psi: &ConvexFunction,
    phi_weight: f64,
    psi_weight: f64,
    y: &mut [f64],
    du: &mut [f64],
    dv: &mut [f64],
    y_phi: &mut [f64],
    y_psi: &mut [f64],
) -> Result<()> {
    let stage = |f: &ConvexFunction, w: f64, y: &mut [f64], inc: &mut [f64], at: &mut [f64]| -> Result<()> {
        inc.copy_from_slice(y);
        f.prox_in_place(y, w)?;
        for (d, v) in inc.iter_mut().zip(y.iter()) {
            *d -= v;
        }
        at.copy_from_slice(y);
        Ok(())
    };
    match order {
        Splitting::PhiFirst => {
            stage(phi, phi_weight, y, du, y_phi)?;
            stage(psi, psi_weight, y, dv, y_psi)
        }
        Splitting::PsiFirst => {
            stage(psi, psi_weight, y, dv, y_psi)?;
            stage(phi, phi_weight, y, du, y_phi)
        }
    }
}

/// Solves the BSVI backward on `bundle`.
pub fn solve_bsvi(
    bundle: &ReflectedPathBundle,
    driver: &Driver,
    phi: &ConvexFunction,
    psi: &ConvexFunction,
    kappa: &TerminalCondition,
    options: &SolverOptions,
) -> Result<BsdeSolution> {
    let m = driver.m();
    let k = bundle.k;
    if driver.k() != k || phi.dim() != m || psi.dim() != m || kappa.m() != m {
        return Err(Error::invalid_input(MODULE, "dimension mismatch between bundle, driver, convex functions and kappa"));
    }
    phi.validate()?;
    psi.validate()?;
    let (d, n, paths) = (bundle.dim, bundle.grid.steps(), bundle.paths);
    let nodes = n + 1;
    let dt = bundle.grid.dt();
    let start = bundle.start_index;
    let mk = m * k;

    let mut y = vec![0.0; paths * nodes * m];
    let mut z = vec![0.0; paths * n * mk];
    let mut du = vec![0.0; paths * n * m];
    let mut dv = vec![0.0; paths * n * m];
    let mut y_phi = vec![0.0; paths * n * m];
    let mut y_psi = vec![0.0; paths * n * m];
    let mut psi_weight = vec![0.0; paths * n];

    // terminal values
    for p in 0..paths {
        let o = (p * nodes + n) * m;
        kappa.eval(bundle.x_at(p, n), &mut y[o..o + m]);
        if y[o..o + m].iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_model(MODULE, format!("non-finite terminal value on path {p}")));
        }
        let v = &y[o..o + m];
        if !phi.contains(v) || !psi.contains(v) {
            return Err(Error::invalid_model(
                MODULE,
                format!("kappa(X_T) = {v:?} on path {p} lies outside Dom(phi) ∩ Dom(psi)"),
            ));
        }
    }

    let mut states = vec![0.0; paths * d];
    let mut next = vec![0.0; paths * m];
    let mut z_targets = vec![0.0; paths * mk];
    let mut step_y = vec![0.0; paths * m];
    let mut du_s = vec![0.0; paths * m];
    let mut dv_s = vec![0.0; paths * m];
    let mut yphi_s = vec![0.0; paths * m];
    let mut ypsi_s = vec![0.0; paths * m];
    let mut max_condition = 1.0f64;

    for s in (start..n).rev() {
        let r = bundle.grid.node(s);
        for p in 0..paths {
            states[p * d..(p + 1) * d].copy_from_slice(bundle.x_at(p, s));
            let o = (p * nodes + s + 1) * m;
            next[p * m..(p + 1) * m].copy_from_slice(&y[o..o + m]);
        }
        let design = options
            .basis
            .design(&states, paths, d)
            .map_err(|e| Error::numeric(MODULE, format!("step {s}: {e}")))?;
        max_condition = max_condition.max(design.info().condition);
        let cond_mean = design.fit(&next, m);
        for p in 0..paths {
            let db = bundle.db_at(p, s);
            for i in 0..m {
                let resid = next[p * m + i] - cond_mean[p * m + i];
                for j in 0..k {
                    z_targets[p * mk + i * k + j] = resid * db[j] / dt;
                }
            }
        }
        let z_fit = design.fit(&z_targets, mk);

        let y_node = &mut step_y;
        y_node
            .par_chunks_mut(m)
            .zip(du_s.par_chunks_mut(m))
            .zip(dv_s.par_chunks_mut(m))
            .zip(yphi_s.par_chunks_mut(m))
            .zip(ypsi_s.par_chunks_mut(m))
            .enumerate()
            .try_for_each_init(
                || (vec![0.0; m], vec![0.0; m], vec![0.0; m]),
                |(guess, fv, gv), (p, ((((tilde, u), v), a), b))| -> Result<()> {
                    let x = bundle.x_at(p, s);
                    let da = bundle.da(p, s);
                    let base = &cond_mean[p * m..(p + 1) * m];
                    let zk = &z_fit[p * mk..(p + 1) * mk];
                    guess.copy_from_slice(base);
                    gv.iter_mut().for_each(|v| *v = 0.0);
                    fv.iter_mut().for_each(|v| *v = 0.0);
                    for it in 0..=options.picard_iters {
                        if !driver.f_is_zero {
                            driver.eval_f(r, x, guess, zk, fv);
                        }
                        if !driver.g_is_zero && da > 0.0 {
                            driver.eval_g(r, x, guess, gv);
                        }
                        for i in 0..m {
                            tilde[i] = base[i] + dt * fv[i] + da * gv[i];
                        }
                        if tilde.iter().any(|v| !v.is_finite()) {
                            return Err(Error::invalid_model(MODULE, format!("non-finite driver output at path {p} step {s}")));
                        }
                        if it < options.picard_iters {
                            guess.copy_from_slice(tilde);
                        }
                    }
                    apply_prox(options.splitting, phi, psi, dt, da, tilde, u, v, a, b)
                },
            )?;
        for p in 0..paths {
            let o = (p * nodes + s) * m;
            y[o..o + m].copy_from_slice(&step_y[p * m..(p + 1) * m]);
            let so = (p * n + s) * m;
            du[so..so + m].copy_from_slice(&du_s[p * m..(p + 1) * m]);
            dv[so..so + m].copy_from_slice(&dv_s[p * m..(p + 1) * m]);
            y_phi[so..so + m].copy_from_slice(&yphi_s[p * m..(p + 1) * m]);
            y_psi[so..so + m].copy_from_slice(&ypsi_s[p * m..(p + 1) * m]);
            z[(p * n + s) * mk..(p * n + s + 1) * mk].copy_from_slice(&z_fit[p * mk..(p + 1) * mk]);
            psi_weight[p * n + s] = bundle.da(p, s);
        }
    }

    let mut sol = BsdeSolution {
        grid: bundle.grid,
        paths,
        m,
        k,
        start_index: start,
        seed: bundle.seed,
        splitting: options.splitting,
        y,
        z,
        du,
        dv,
        y_phi,
        y_psi,
        psi_weight,
        max_condition,
    };

    if start > 0 {
        let (u_value, _) = sol.node_stats(start);
        let ext = extend_before_t(&u_value, &bundle.grid, phi, psi, start, options.splitting)?;
        for p in 0..paths {
            for node in 0..start {
                let o = (p * nodes + node) * m;
                sol.y[o..o + m].copy_from_slice(&ext.y[node * m..(node + 1) * m]);
                let so = (p * n + node) * m;
                sol.du[so..so + m].copy_from_slice(&ext.du[node * m..(node + 1) * m]);
                sol.dv[so..so + m].copy_from_slice(&ext.dv[node * m..(node + 1) * m]);
                sol.y_phi[so..so + m].copy_from_slice(&ext.y_phi[node * m..(node + 1) * m]);
                sol.y_psi[so..so + m].copy_from_slice(&ext.y_psi[node * m..(node + 1) * m]);
                sol.psi_weight[p * n + node] = dt;
            }
        }
    }
    Ok(sol)
}

/// Deterministic continuation on `[0, t]`, one entry per node/step
/// before `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Extension {
    /// `start x m` values at nodes `0..start`.
    pub y: Vec<f64>,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub y_phi: Vec<f64>,
    pub y_psi: Vec<f64>,
}

/// Backward proximal stepping `Y_k = prox_psi(prox_phi(Y_{k+1}, dt), dt)`
/// from the value at node `start` down to node 0. Both measures are `dr`
/// on this segment and `A = 0`, `Z = 0` there.
pub fn extend_before_t(
    y_start: &[f64],
    grid: &TimeGrid,
    phi: &ConvexFunction,
    psi: &ConvexFunction,
    start: usize,
    splitting: Splitting,
) -> Result<Extension> {
    let m = y_start.len();
    if phi.dim() != m || psi.dim() != m {
        return Err(Error::invalid_input(MODULE, "dimension mismatch in extension"));
    }
    if start > grid.steps() {
        return Err(Error::invalid_input(MODULE, "start index beyond the grid"));
    }
    let dt = grid.dt();
    let mut ext = Extension {
        y: vec![0.0; start * m],
        du: vec![0.0; start * m],
        dv: vec![0.0; start * m],
        y_phi: vec![0.0; start * m],
        y_psi: vec![0.0; start * m],
    };
    let mut cur = y_start.to_vec();
    for node in (0..start).rev() {
        let r = node * m..(node + 1) * m;
        let (mut u, mut v, mut a, mut b) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        apply_prox(splitting, phi, psi, dt, dt, &mut cur, &mut u, &mut v, &mut a, &mut b)?;
        ext.y[r.clone()].copy_from_slice(&cur);
        ext.du[r.clone()].copy_from_slice(&u);
        ext.dv[r.clone()].copy_from_slice(&v);
        ext.y_phi[r.clone()].copy_from_slice(&a);
        ext.y_psi[r].copy_from_slice(&b);
    }
    Ok(ext)
}

/// Worst violation of the discrete integral inequalities
/// `sum <dU_k, S_k - Y_k> + phi(Y_k) dt <= sum phi(S_k) dt` (and the `psi`
/// analogue with weights `dA_k`) over random paths, random piecewise-linear
/// test processes `S` with values in `Dom(phi) ∩ Dom(psi)`, and random
/// windows `[u, v]`. Nonpositive means no violation was found.
pub fn vi_residual(sol: &BsdeSolution, phi: &ConvexFunction, psi: &ConvexFunction, n_tests: usize, seed: u64) -> Result<f64> {
    let m = sol.m;
    let n = sol.grid.steps();
    let dt = sol.grid.dt();
    let spread = sol.y.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let margins: Result<Vec<f64>> = (0..n_tests)
        .into_par_iter()
        .map(|i| {
            let mut rng = uniform_stream(seed, 1000 + i as u64);
            let path = rng.random_range(0..sol.paths);
            let lo = rng.random_range(0..n);
            let hi = rng.random_range(lo + 1..=n);
            // knots of the test process
            let n_knots = rng.random_range(2..=5usize);
            let mut knot_times: Vec<usize> = (0..n_knots).map(|_| rng.random_range(0..=n)).collect();
            knot_times.push(0);
            knot_times.push(n);
            knot_times.sort_unstable();
            knot_times.dedup();
            let mut knot_vals = Vec::with_capacity(knot_times.len());
            for _ in &knot_times {
                knot_vals.push(feasible_point(phi, psi, m, 2.0 * spread, &mut rng)?);
            }
            let test_at = |node: usize| -> Vec<f64> {
                let j = knot_times.partition_point(|&t| t <= node).min(knot_times.len() - 1).max(1);
                let (t0, t1) = (knot_times[j - 1], knot_times[j]);
                let w = if t1 == t0 { 0.0 } else { (node - t0) as f64 / (t1 - t0) as f64 };
                knot_vals[j - 1].iter().zip(&knot_vals[j]).map(|(a, b)| a + w * (b - a)).collect()
            };
            let mut lhs_phi = 0.0;
            let mut rhs_phi = 0.0;
            let mut lhs_psi = 0.0;
            let mut rhs_psi = 0.0;
            for step in lo..hi {
                let s = test_at(step);
                let o = (path * n + step) * m;
                let yp = &sol.y_phi[o..o + m];
                let ys = &sol.y_psi[o..o + m];
                let du = &sol.du[o..o + m];
                let dv = &sol.dv[o..o + m];
                let w = sol.psi_weight[path * n + step];
                lhs_phi += du.iter().zip(&s).zip(yp).map(|((u, a), b)| u * (a - b)).sum::<f64>();
                lhs_phi += extended_mul(phi.value(yp), dt);
                rhs_phi += extended_mul(phi.value(&s), dt);
                lhs_psi += dv.iter().zip(&s).zip(ys).map(|((u, a), b)| u * (a - b)).sum::<f64>();
                lhs_psi += extended_mul(psi.value(ys), w);
                rhs_psi += extended_mul(psi.value(&s), w);
            }
            let margin = |l: f64, r: f64| if l == f64::INFINITY && r == f64::INFINITY { 0.0 } else { l - r };
            Ok(margin(lhs_phi, rhs_phi).max(margin(lhs_psi, rhs_psi)))
        })
        .collect();
    Ok(margins?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// `v * w` with `+inf * 0 = 0`.
fn extended_mul(v: f64, w: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        v * w
    }
}

fn feasible_point(phi: &ConvexFunction, psi: &ConvexFunction, m: usize, scale: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    for _ in 0..100 {
        let mut p: Vec<f64> = (0..m).map(|_| rng.random_range(-scale..=scale)).collect();
        phi.prox_in_place(&mut p, 1.0)?;
        psi.prox_in_place(&mut p, 1.0)?;
        if phi.contains(&p) && psi.contains(&p) {
            return Ok(p);
        }
    }
    Err(Error::numeric(MODULE, "could not sample a point of Dom(phi) ∩ Dom(psi)"))
}

/// Smallest (over paths) value of
/// `sum_k <Y_k - Y'_k, dK_k - dK'_k>`, evaluated per measure at the points
/// where the increments are subgradients. Both solutions must share grid,
/// ensemble size and `psi` weights for the pairing to be sign-definite.
pub fn monotonicity_pairing(a: &BsdeSolution, b: &BsdeSolution) -> Result<f64> {
    if a.grid != b.grid || a.paths != b.paths || a.m != b.m {
        return Err(Error::invalid_input(MODULE, "solutions live on different grids or ensembles"));
    }
    let (m, n) = (a.m, a.grid.steps());
    let worst = (0..a.paths)
        .map(|p| {
            let mut total = 0.0;
            for s in 0..n {
                let o = (p * n + s) * m;
                for i in o..o + m {
                    total += (a.y_phi[i] - b.y_phi[i]) * (a.du[i] - b.du[i]);
                    total += (a.y_psi[i] - b.y_psi[i]) * (a.dv[i] - b.dv[i]);
                }
            }
            total
        })
        .fold(f64::INFINITY, f64::min);
    Ok(worst)
}
