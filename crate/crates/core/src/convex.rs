//! Proper lower semicontinuous convex functions on `R^m`, their proximal
//! maps, Moreau-Yosida regularizations and one-sided directional
//! derivatives, plus a sampling-based checker for the compatibility
//! conditions tying `phi`, `psi` to the driver.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::backward::{Driver, TerminalCondition};
use crate::error::{ensure_finite, Error, Result};
use crate::geometry::{LevelSetDomain, ScalarField, VectorField};
use crate::rng::uniform_stream;

const MODULE: &str = "convex";

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-12;
/// Relative slack for membership in a closed ball after projection.
const BALL_SLACK: f64 = 1e-12;

/// User-supplied smooth convex function; `hess` writes a row-major `m x m`
/// matrix.
#[derive(Clone)]
pub struct SmoothConvex {
    pub dim: usize,
    pub value: ScalarField,
    pub grad: VectorField,
    pub hess: VectorField,
}

#[derive(Clone)]
pub enum ConvexFunction {
    Zero { dim: usize },
    /// `(alpha / 2) |y - center|^2`, `alpha >= 0`.
    Quadratic { alpha: f64, center: Vec<f64> },
    /// Indicator of `[a, inf)` in one dimension.
    IndicatorAtLeast { a: f64 },
    /// Indicator of `(-inf, b]` in one dimension.
    IndicatorAtMost { b: f64 },
    IndicatorBall { center: Vec<f64>, radius: f64 },
    /// `|y|` in one dimension.
    Abs,
    /// `sum_i f_i(y_i)` with one-dimensional parts.
    Separable(Vec<ConvexFunction>),
    Smooth(SmoothConvex),
}

impl fmt::Debug for ConvexFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvexFunction::Zero { dim } => write!(f, "Zero({dim})"),
            ConvexFunction::Quadratic { alpha, center } => write!(f, "Quadratic({alpha}, {center:?})"),
            ConvexFunction::IndicatorAtLeast { a } => write!(f, "Indicator[{a}, inf)"),
            ConvexFunction::IndicatorAtMost { b } => write!(f, "Indicator(-inf, {b}]"),
            ConvexFunction::IndicatorBall { center, radius } => write!(f, "IndicatorBall({center:?}, {radius})"),
            ConvexFunction::Abs => write!(f, "Abs"),
            ConvexFunction::Separable(parts) => f.debug_tuple("Separable").field(parts).finish(),
            ConvexFunction::Smooth(s) => write!(f, "Smooth({})", s.dim),
        }
    }
}

impl ConvexFunction {
    pub fn zero(dim: usize) -> Self {
        ConvexFunction::Zero { dim }
    }

    /// Checks parameters and that separable parts are one-dimensional.
    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexFunction::Zero { dim } if *dim == 0 => Err(Error::invalid_input(MODULE, "zero function of dimension 0")),
            ConvexFunction::Quadratic { alpha, center } => {
                ensure_finite(MODULE, "quadratic center", center)?;
                if center.is_empty() || !(alpha.is_finite() && *alpha >= 0.0) {
                    return Err(Error::invalid_input(MODULE, format!("quadratic needs alpha >= 0 and m >= 1, got {alpha}")));
                }
                Ok(())
            }
            ConvexFunction::IndicatorAtLeast { a } if a.is_nan() => Err(Error::invalid_input(MODULE, "NaN bound")),
            ConvexFunction::IndicatorAtMost { b } if b.is_nan() => Err(Error::invalid_input(MODULE, "NaN bound")),
            ConvexFunction::IndicatorBall { center, radius } => {
                ensure_finite(MODULE, "ball center", center)?;
                if center.is_empty() || !(radius.is_finite() && *radius >= 0.0) {
                    return Err(Error::invalid_input(MODULE, "indicator ball needs radius >= 0"));
                }
                Ok(())
            }
            ConvexFunction::Separable(parts) => {
                if parts.is_empty() {
                    return Err(Error::invalid_input(MODULE, "separable sum without parts"));
                }
                for p in parts {
                    p.validate()?;
                    if p.dim() != 1 {
                        return Err(Error::invalid_input(MODULE, "separable parts must be one-dimensional"));
                    }
                }
                Ok(())
            }
            ConvexFunction::Smooth(s) if s.dim == 0 => Err(Error::invalid_input(MODULE, "smooth function of dimension 0")),
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexFunction::Zero { dim } => *dim,
            ConvexFunction::Quadratic { center, .. } => center.len(),
            ConvexFunction::IndicatorAtLeast { .. } | ConvexFunction::IndicatorAtMost { .. } | ConvexFunction::Abs => 1,
            ConvexFunction::IndicatorBall { center, .. } => center.len(),
            ConvexFunction::Separable(parts) => parts.len(),
            ConvexFunction::Smooth(s) => s.dim,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ConvexFunction::Zero { .. } => true,
            ConvexFunction::Separable(parts) => parts.iter().all(|p| p.is_zero()),
            _ => false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConvexFunction::Zero { .. } => "zero",
            ConvexFunction::Quadratic { .. } => "quadratic",
            ConvexFunction::IndicatorAtLeast { .. } | ConvexFunction::IndicatorAtMost { .. } => "indicator_halfline",
            ConvexFunction::IndicatorBall { .. } => "indicator_ball",
            ConvexFunction::Abs => "abs",
            ConvexFunction::Separable(_) => "separable",
            ConvexFunction::Smooth(_) => "smooth",
        }
    }

    fn check_point(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::invalid_input(MODULE, format!("expected a {}-vector, got {}", self.dim(), y.len())));
        }
        ensure_finite(MODULE, "argument", y)
    }

    /// Value in `(-inf, +inf]`; `+inf` outside the effective domain.
    pub fn value(&self, y: &[f64]) -> f64 {
        match self {
            ConvexFunction::Zero { .. } => 0.0,
            ConvexFunction::Quadratic { alpha, center } => 0.5 * alpha * dist2(y, center),
            ConvexFunction::IndicatorAtLeast { a } => {
                if y[0] >= *a {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ConvexFunction::IndicatorAtMost { b } => {
                if y[0] <= *b {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ConvexFunction::IndicatorBall { center, radius } => {
                if dist2(y, center).sqrt() <= radius * (1.0 + BALL_SLACK) + BALL_SLACK {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ConvexFunction::Abs => y[0].abs(),
            ConvexFunction::Separable(parts) => parts.iter().zip(y).map(|(p, v)| p.value(std::slice::from_ref(v))).sum(),
            ConvexFunction::Smooth(s) => (s.value)(y),
        }
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        self.value(y) < f64::INFINITY
    }

    /// `argmin_z (1 / 2 eps) |y - z|^2 + f(z)`. A zero weight returns `y`.
    pub fn prox(&self, y: &[f64], eps: f64) -> Result<Vec<f64>> {
        self.check_point(y)?;
        let mut out = y.to_vec();
        self.prox_in_place(&mut out, eps)?;
        Ok(out)
    }

    pub(crate) fn prox_in_place(&self, y: &mut [f64], eps: f64) -> Result<()> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::invalid_input(MODULE, format!("prox weight must be finite and >= 0, got {eps}")));
        }
        if eps == 0.0 {
            return Ok(());
        }
        match self {
            ConvexFunction::Zero { .. } => {}
            ConvexFunction::Quadratic { alpha, center } => {
                let s = eps * alpha;
                for (v, c) in y.iter_mut().zip(center) {
                    *v = (*v + s * c) / (1.0 + s);
                }
            }
            ConvexFunction::IndicatorAtLeast { a } => y[0] = y[0].max(*a),
            ConvexFunction::IndicatorAtMost { b } => y[0] = y[0].min(*b),
            ConvexFunction::IndicatorBall { center, radius } => {
                let r = dist2(y, center).sqrt();
                if r > *radius {
                    let s = radius / r;
                    for (v, c) in y.iter_mut().zip(center) {
                        *v = c + (*v - c) * s;
                    }
                }
            }
            ConvexFunction::Abs => {
                let v = y[0];
                y[0] = v.signum() * (v.abs() - eps).max(0.0);
            }
            ConvexFunction::Separable(parts) => {
                for (p, v) in parts.iter().zip(y.iter_mut()) {
                    p.prox_in_place(std::slice::from_mut(v), eps)?;
                }
            }
            ConvexFunction::Smooth(s) => newton_prox(s, y, eps)?,
        }
        Ok(())
    }

    /// Gradient of the Moreau-Yosida regularization, `(y - prox(y, eps)) / eps`.
    pub fn yosida_grad(&self, y: &[f64], eps: f64) -> Result<Vec<f64>> {
        if !(eps > 0.0) {
            return Err(Error::invalid_input(MODULE, format!("Moreau-Yosida parameter must be positive, got {eps}")));
        }
        let p = self.prox(y, eps)?;
        Ok(y.iter().zip(&p).map(|(a, b)| (a - b) / eps).collect())
    }

    /// `inf_z (1 / 2 eps) |y - z|^2 + f(z)`, attained at the prox point.
    pub fn moreau_envelope(&self, y: &[f64], eps: f64) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::invalid_input(MODULE, format!("Moreau-Yosida parameter must be positive, got {eps}")));
        }
        let p = self.prox(y, eps)?;
        Ok(dist2(y, &p) / (2.0 * eps) + self.value(&p))
    }

    /// One-sided directional derivatives `(f'_-(y, z), f'_+(y, z))` with
    /// `f'_-(y, z) = -f'_+(y, -z)`.
    pub fn dir_derivatives(&self, y: &[f64], z: &[f64]) -> Result<(f64, f64)> {
        self.check_point(y)?;
        if z.len() != y.len() {
            return Err(Error::invalid_input(MODULE, "direction dimension mismatch"));
        }
        ensure_finite(MODULE, "direction", z)?;
        if !self.contains(y) {
            return Err(Error::outside_domain(MODULE, format!("{y:?} is outside Dom({})", self.name())));
        }
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        Ok((-self.dir_plus(y, &neg), self.dir_plus(y, z)))
    }

    /// Subdifferential of a one-dimensional function at `y` as an interval
    /// `[f'_-(y), f'_+(y)]` (endpoints may be infinite).
    pub fn subdifferential_1d(&self, y: f64) -> Result<(f64, f64)> {
        if self.dim() != 1 {
            return Err(Error::invalid_input(MODULE, "subdifferential interval is only defined for m = 1"));
        }
        self.dir_derivatives(&[y], &[1.0])
    }

    fn dir_plus(&self, y: &[f64], z: &[f64]) -> f64 {
        match self {
            ConvexFunction::Zero { .. } => 0.0,
            ConvexFunction::Quadratic { alpha, center } => {
                y.iter().zip(center).zip(z).map(|((a, c), d)| alpha * (a - c) * d).sum()
            }
            ConvexFunction::IndicatorBall { center, radius } => {
                let r = dist2(y, center).sqrt();
                let inward: f64 = y.iter().zip(center).zip(z).map(|((a, c), d)| (a - c) * d).sum();
                let on_boundary = r >= radius * (1.0 - BALL_SLACK) - BALL_SLACK;
                if !on_boundary || z.iter().all(|v| *v == 0.0) || inward < 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ConvexFunction::Separable(parts) => {
                parts.iter().enumerate().map(|(i, p)| p.dir_plus(&y[i..=i], &z[i..=i])).sum()
            }
            ConvexFunction::Smooth(s) => {
                // differentiable, so both one-sided derivatives are <grad, z>
                let mut g = vec![0.0; s.dim];
                (s.grad)(y, &mut g);
                dot(&g, z)
            }
            one_d => {
                let (left, right) = one_d.one_sided_1d(y[0]);
                let d = z[0];
                if d > 0.0 {
                    d * right
                } else if d < 0.0 {
                    d * left
                } else {
                    0.0
                }
            }
        }
    }

    /// Left and right derivatives of the one-dimensional built-ins at a
    /// point of their domain.
    fn one_sided_1d(&self, y: f64) -> (f64, f64) {
        match self {
            ConvexFunction::IndicatorAtLeast { a } => {
                if y > *a {
                    (0.0, 0.0)
                } else {
                    (f64::NEG_INFINITY, 0.0)
                }
            }
            ConvexFunction::IndicatorAtMost { b } => {
                if y < *b {
                    (0.0, 0.0)
                } else {
                    (0.0, f64::INFINITY)
                }
            }
            ConvexFunction::Abs => {
                if y > 0.0 {
                    (1.0, 1.0)
                } else if y < 0.0 {
                    (-1.0, -1.0)
                } else {
                    (-1.0, 1.0)
                }
            }
            _ => unreachable!("not a one-dimensional built-in"),
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Right directional derivative of a convex `value` by difference quotients
/// `q(t) = (f(y + t z) - f(y)) / t` on `t = 2^-k`, `k = 10..=40`, with one
/// Richardson step. The quotients decrease monotonically to the limit, so the
/// extrapolated sequence is read off where it is most stable.
pub fn numeric_dir_plus(value: impl Fn(&[f64]) -> f64, y: &[f64], z: &[f64]) -> f64 {
    let f0 = value(y);
    let mut point = y.to_vec();
    let quotients: Vec<f64> = (10..=40)
        .map(|k| {
            let t = (-(k as f64)).exp2();
            for i in 0..y.len() {
                point[i] = y[i] + t * z[i];
            }
            (value(&point) - f0) / t
        })
        .collect();
    if quotients.contains(&f64::INFINITY) {
        return f64::INFINITY;
    }
    let extrapolated: Vec<f64> = quotients.windows(2).map(|w| 2.0 * w[1] - w[0]).collect();
    let mut best = (f64::INFINITY, extrapolated[0]);
    for w in extrapolated.windows(2) {
        let gap = (w[1] - w[0]).abs();
        if gap < best.0 {
            best = (gap, w[1]);
        }
    }
    best.1
}

fn newton_prox(s: &SmoothConvex, y: &mut [f64], eps: f64) -> Result<()> {
    let m = s.dim;
    let target = y.to_vec();
    let objective = |p: &[f64]| dist2(p, &target) / (2.0 * eps) + (s.value)(p);
    let mut g = vec![0.0; m];
    let mut h = vec![0.0; m * m];
    let mut trial = vec![0.0; m];
    let mut current = objective(y);
    for _ in 0..NEWTON_MAX_ITER {
        (s.grad)(y, &mut g);
        (s.hess)(y, &mut h);
        let grad = DVector::from_iterator(m, (0..m).map(|i| (y[i] - target[i]) / eps + g[i]));
        if grad.norm() <= NEWTON_TOL * (1.0 + y.iter().map(|v| v.abs()).fold(0.0, f64::max)) / eps.max(1.0) {
            return Ok(());
        }
        let mut hess = DMatrix::from_row_slice(m, m, &h);
        for i in 0..m {
            hess[(i, i)] += 1.0 / eps;
        }
        let step = hess
            .lu()
            .solve(&grad)
            .ok_or_else(|| Error::numeric(MODULE, "singular Newton system in prox"))?;
        let mut t = 1.0;
        loop {
            for i in 0..m {
                trial[i] = y[i] - t * step[i];
            }
            let val = objective(&trial);
            if val <= current || t < 1e-10 {
                y.copy_from_slice(&trial);
                current = val;
                break;
            }
            t *= 0.5;
        }
        if t * step.norm() <= NEWTON_TOL * (1.0 + y.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            return Ok(());
        }
    }
    Err(Error::numeric(MODULE, format!("Newton prox did not converge in {NEWTON_MAX_ITER} iterations")))
}

// ---------------------------------------------------------------------------
// Compatibility conditions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SampleCounts {
    pub y: usize,
    pub eps: usize,
    pub t: usize,
    pub x: usize,
    pub z: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        SampleCounts { y: 64, eps: 9, t: 4, x: 16, z: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompatConfig {
    /// Common interior point of `Dom(phi)` and `Dom(psi)`.
    pub u0: Vec<f64>,
    pub c: f64,
    /// Bound on `sup |phi(kappa)| + sup |psi(kappa)|`; `None` only asks for finiteness.
    pub m_bound: Option<f64>,
    pub samples: SampleCounts,
    /// Half-width of the sampling box for `y`.
    pub y_box: f64,
    /// Radius of the sphere sampled for `z`.
    pub z_radius: f64,
    pub horizon: f64,
}

impl CompatConfig {
    pub fn new(u0: Vec<f64>, c: f64, horizon: f64) -> Self {
        let y_box = 2.0 * (1.0 + u0.iter().map(|v| v.abs()).fold(0.0, f64::max));
        CompatConfig { u0, c, m_bound: None, samples: SampleCounts::default(), y_box, z_radius: 1.0, horizon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionResult {
    pub name: &'static str,
    /// Smallest sampled value of (right side - left side).
    pub worst_margin: f64,
    pub witness: String,
    pub pass: bool,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompatReport {
    pub conditions: Vec<ConditionResult>,
    /// Sampled `sup |phi(kappa)| + sup |psi(kappa)|`.
    pub terminal_bound: f64,
    /// How far `u0` is from minimizing `phi` and `psi` on the samples
    /// (`phi(u0) - min phi`, `psi(u0) - min psi`); not applied automatically.
    pub normalization_shift: (f64, f64),
    pub pass: bool,
}

pub const COMPAT_TOL: f64 = 1e-9;

#[derive(Clone, Copy)]
struct Worst {
    margin: f64,
    index: usize,
}

impl Worst {
    fn new() -> Self {
        Worst { margin: f64::INFINITY, index: usize::MAX }
    }

    fn record(&mut self, margin: f64, index: usize) {
        // NaN margins are failures
        let m = if margin.is_nan() { f64::NEG_INFINITY } else { margin };
        if m < self.margin {
            self.margin = m;
            self.index = index;
        }
    }

    fn merge(self, other: Worst) -> Worst {
        if other.margin < self.margin || (other.margin == self.margin && other.index < self.index) {
            other
        } else {
            self
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Samples the closure of `domain`: a mix of interior points and their radial
/// images on the boundary.
pub(crate) fn sample_closure(domain: &LevelSetDomain, rng: &mut impl Rng) -> Vec<f64> {
    let bb = domain.bounding_box();
    for _ in 0..10_000 {
        let x: Vec<f64> = bb.lo.iter().zip(&bb.hi).map(|(a, b)| rng.random_range(*a..=*b)).collect();
        if domain.phi(&x) <= 0.0 {
            return x;
        }
        let mut p = x;
        if domain.project_in_place(&mut p).is_ok() {
            return p;
        }
    }
    bb.lo.iter().zip(&bb.hi).map(|(a, b)| 0.5 * (a + b)).collect()
}

/// Falsification check of the terminal bound and the compatibility
/// inequalities on random samples. PASS means no sampled counterexample.
pub fn check_compatibility(
    driver: &Driver,
    phi: &ConvexFunction,
    psi: &ConvexFunction,
    kappa: &TerminalCondition,
    domain: &LevelSetDomain,
    cfg: &CompatConfig,
    seed: u64,
) -> Result<CompatReport> {
    let m = driver.m();
    let k = driver.k();
    let sc = cfg.samples;
    if [sc.y, sc.eps, sc.t, sc.x, sc.z].contains(&0) {
        return Err(Error::invalid_input(MODULE, "sample counts must be positive"));
    }
    if phi.dim() != m || psi.dim() != m || cfg.u0.len() != m || kappa.m() != m {
        return Err(Error::invalid_input(MODULE, "dimension mismatch between driver, convex functions, kappa and u0"));
    }

    let mut rng = uniform_stream(seed, 0);
    let ys: Vec<Vec<f64>> = (0..sc.y)
        .map(|_| (0..m).map(|_| rng.random_range(-cfg.y_box..=cfg.y_box)).collect())
        .collect();
    let epss: Vec<f64> = (0..sc.eps)
        .map(|j| if sc.eps == 1 { 1.0 } else { 10f64.powf(-4.0 + 4.0 * j as f64 / (sc.eps - 1) as f64) })
        .collect();
    let ts: Vec<f64> = (0..sc.t)
        .map(|j| if sc.t == 1 { 0.0 } else { cfg.horizon * j as f64 / (sc.t - 1) as f64 })
        .collect();
    let xs: Vec<Vec<f64>> = (0..sc.x).map(|_| sample_closure(domain, &mut rng)).collect();
    let zs: Vec<Vec<f64>> = (0..sc.z)
        .map(|_| {
            let mut v: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let n = norm(&v).max(1e-300);
            v.iter_mut().for_each(|e| *e *= cfg.z_radius / n);
            v
        })
        .collect();

    // (a): terminal values
    let mut kv = vec![0.0; m];
    let (mut sup_phi, mut sup_psi) = (0.0f64, 0.0f64);
    let mut worst_a_x = 0;
    for (i, x) in xs.iter().enumerate() {
        kappa.eval(x, &mut kv);
        let (a, b) = (phi.value(&kv).abs(), psi.value(&kv).abs());
        if !(a + b <= sup_phi.max(0.0) + sup_psi.max(0.0)) {
            worst_a_x = i;
        }
        sup_phi = sup_phi.max(if a.is_nan() { f64::INFINITY } else { a });
        sup_psi = sup_psi.max(if b.is_nan() { f64::INFINITY } else { b });
    }
    let terminal_bound = sup_phi + sup_psi;
    let margin_a = match cfg.m_bound {
        Some(mb) => mb - terminal_bound,
        None if terminal_bound.is_finite() => 0.0,
        None => f64::NEG_INFINITY,
    };

    // (b), (d), (e), (f), (g) over (y, eps) x (t, x) x z
    let pairs: Vec<(usize, usize)> = (0..sc.y).flat_map(|i| (0..sc.eps).map(move |j| (i, j))).collect();
    let per_pair = ts.len() * xs.len() * zs.len();
    let f_u0: Vec<Vec<f64>> = {
        let zero = vec![0.0; m * k];
        let mut out = vec![0.0; m];
        ts.iter()
            .flat_map(|t| xs.iter().map(move |x| (*t, x)))
            .map(|(t, x)| {
                driver.eval_f(t, x, &cfg.u0, &zero, &mut out);
                out.clone()
            })
            .collect()
    };
    let g_u0: Vec<Vec<f64>> = {
        let mut out = vec![0.0; m];
        ts.iter()
            .flat_map(|t| xs.iter().map(move |x| (*t, x)))
            .map(|(t, x)| {
                driver.eval_g(t, x, &cfg.u0, &mut out);
                out.clone()
            })
            .collect()
    };

    let worst: Result<Vec<[Worst; 5]>> = pairs
        .par_iter()
        .enumerate()
        .map(|(pi, &(yi, ej))| {
            let y = &ys[yi];
            let eps = epss[ej];
            let gphi = phi.yosida_grad(y, eps)?;
            let gpsi = psi.yosida_grad(y, eps)?;
            let (ngphi, ngpsi) = (norm(&gphi), norm(&gpsi));
            let mut w = [Worst::new(); 5];
            w[0].record(dot(&gphi, &gpsi), pi * per_pair);
            let mut fv = vec![0.0; m];
            let mut gv = vec![0.0; m];
            for (ti, &t) in ts.iter().enumerate() {
                for (xi, x) in xs.iter().enumerate() {
                    let txi = ti * xs.len() + xi;
                    driver.eval_g(t, x, y, &mut gv);
                    let base = pi * per_pair + txi * zs.len();
                    // (d)
                    w[1].record(cfg.c * ngpsi * (1.0 + norm(&gv)) - dot(&gphi, &gv), base);
                    // (f)
                    let g0 = &g_u0[txi];
                    w[3].record(cfg.c * ngpsi * (1.0 + norm(g0)) + dot(&gphi, g0), base);
                    // (g)
                    let f0 = &f_u0[txi];
                    w[4].record(cfg.c * ngphi * (1.0 + norm(f0)) + dot(&gpsi, f0), base);
                    for (zi, z) in zs.iter().enumerate() {
                        driver.eval_f(t, x, y, z, &mut fv);
                        // (e)
                        w[2].record(cfg.c * ngphi * (1.0 + norm(&fv)) - dot(&gpsi, &fv), base + zi);
                    }
                }
            }
            Ok(w)
        })
        .collect();
    let worst = worst?.into_iter().fold([Worst::new(); 5], |acc, w| {
        let mut out = acc;
        for i in 0..5 {
            out[i] = acc[i].merge(w[i]);
        }
        out
    });

    let describe = |index: usize, with_tx: bool, with_z: bool| -> String {
        if index == usize::MAX {
            return "none".into();
        }
        let pi = index / per_pair;
        let rest = index % per_pair;
        let (yi, ej) = pairs[pi];
        let mut s = format!("y={:?} eps={:e}", ys[yi], epss[ej]);
        if with_tx {
            let txi = rest / zs.len();
            s.push_str(&format!(" t={} x={:?}", ts[txi / xs.len()], xs[txi % xs.len()]));
        }
        if with_z {
            s.push_str(&format!(" z={:?}", zs[rest % zs.len()]));
        }
        s
    };

    let result = |name, w: Worst, witness: String, samples| ConditionResult {
        name,
        worst_margin: w.margin,
        pass: w.margin >= -COMPAT_TOL,
        witness,
        samples,
    };
    let mut conditions = vec![ConditionResult {
        name: "a",
        worst_margin: margin_a,
        witness: format!("x={:?}", xs[worst_a_x]),
        pass: margin_a >= -COMPAT_TOL,
        samples: xs.len(),
    }];
    let n_yx = pairs.len() * ts.len() * xs.len();
    conditions.push(result("b", worst[0], describe(worst[0].index, false, false), pairs.len()));
    conditions.push(result("d", worst[1], describe(worst[1].index, true, false), n_yx));
    conditions.push(result("e", worst[2], describe(worst[2].index, true, true), n_yx * zs.len()));
    conditions.push(result("f", worst[3], describe(worst[3].index, true, false), n_yx));
    conditions.push(result("g", worst[4], describe(worst[4].index, true, false), n_yx));

    // u0 must be an interior point of both domains
    let probe = 1e-6 * (1.0 + norm(&cfg.u0));
    let mut interior_margin = 0.0;
    let mut interior_witness = "u0 interior".to_string();
    for i in 0..m {
        for s in [-1.0, 1.0] {
            let mut p = cfg.u0.clone();
            p[i] += s * probe;
            if !(phi.contains(&p) && psi.contains(&p)) {
                interior_margin = f64::NEG_INFINITY;
                interior_witness = format!("u0 + {s}*{probe:e}*e_{i} leaves Dom(phi) or Dom(psi)");
            }
        }
    }
    if !(phi.contains(&cfg.u0) && psi.contains(&cfg.u0)) {
        interior_margin = f64::NEG_INFINITY;
        interior_witness = "u0 outside Dom(phi) or Dom(psi)".into();
    }
    conditions.push(ConditionResult {
        name: "u0_interior",
        worst_margin: interior_margin,
        witness: interior_witness,
        pass: interior_margin >= 0.0,
        samples: 2 * m + 1,
    });

    let min_over = |f: &ConvexFunction| ys.iter().map(|y| f.value(y)).fold(f.value(&cfg.u0), f64::min);
    let normalization_shift = (phi.value(&cfg.u0) - min_over(phi), psi.value(&cfg.u0) - min_over(psi));

    let pass = conditions.iter().all(|c| c.pass);
    Ok(CompatReport { conditions, terminal_bound, normalization_shift, pass })
}

/// Convenience constructor for user-supplied smooth functions.
pub fn smooth(
    dim: usize,
    value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    hess: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
) -> ConvexFunction {
    ConvexFunction::Smooth(SmoothConvex { dim, value: Arc::new(value), grad: Arc::new(grad), hess: Arc::new(hess) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn builtins() -> Vec<ConvexFunction> {
        vec![
            ConvexFunction::zero(2),
            ConvexFunction::Quadratic { alpha: 1.5, center: vec![0.3, -0.2] },
            ConvexFunction::IndicatorAtLeast { a: 0.0 },
            ConvexFunction::IndicatorAtMost { b: 1.0 },
            ConvexFunction::IndicatorBall { center: vec![0.5, 0.0], radius: 1.0 },
            ConvexFunction::Abs,
            ConvexFunction::Separable(vec![ConvexFunction::Abs, ConvexFunction::IndicatorAtLeast { a: -0.5 }]),
            quartic(),
        ]
    }

    // y^4 / 4 + y^2 / 2 in one dimension
    fn quartic() -> ConvexFunction {
        smooth(
            1,
            |y| y[0].powi(4) / 4.0 + y[0] * y[0] / 2.0,
            |y, g| g[0] = y[0].powi(3) + y[0],
            |y, h| h[0] = 3.0 * y[0] * y[0] + 1.0,
        )
    }

    fn point(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        (0..m).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    #[test]
    fn closed_form_examples() {
        let lo = ConvexFunction::IndicatorAtLeast { a: 0.0 };
        assert_eq!(lo.yosida_grad(&[-2.0], 0.5).unwrap(), vec![-4.0]);
        assert_eq!(lo.moreau_envelope(&[-2.0], 0.5).unwrap(), 4.0);
        let hi = ConvexFunction::IndicatorAtMost { b: 1.0 };
        assert_eq!(hi.yosida_grad(&[3.0], 1.0).unwrap(), vec![2.0]);
        let q = ConvexFunction::Quadratic { alpha: 1.0, center: vec![0.0] };
        assert_eq!(q.yosida_grad(&[2.0], 1.0).unwrap(), vec![1.0]);
        assert_eq!(q.moreau_envelope(&[2.0], 1.0).unwrap(), 1.0);
        assert_eq!(ConvexFunction::zero(3).moreau_envelope(&[1.0, -4.0, 2.0], 0.1).unwrap(), 0.0);
        assert_eq!(ConvexFunction::Abs.dir_derivatives(&[0.0], &[1.0]).unwrap(), (-1.0, 1.0));
    }

    #[test]
    fn zero_weight_is_identity_and_negative_is_rejected() {
        for f in builtins() {
            let y = vec![0.7; f.dim()];
            assert_eq!(f.prox(&y, 0.0).unwrap(), y);
            assert!(f.prox(&y, -1.0).is_err());
            assert!(f.yosida_grad(&y, 0.0).is_err());
        }
    }

    #[test]
    fn envelope_is_the_infimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for f in builtins() {
            for _ in 0..200 {
                let y = point(&mut rng, f.dim());
                let eps = rng.random_range(0.05..2.0);
                let env = f.moreau_envelope(&y, eps).unwrap();
                let p = f.prox(&y, eps).unwrap();
                for _ in 0..5 {
                    let z: Vec<f64> = p.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
                    let obj = dist2(&y, &z) / (2.0 * eps) + f.value(&z);
                    assert!(obj >= env - 1e-10, "{f:?} y={y:?} eps={eps}");
                }
            }
        }
    }

    #[test]
    fn yosida_gradient_is_lipschitz_and_prox_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for f in builtins() {
            for _ in 0..1000 {
                let (a, b) = (point(&mut rng, f.dim()), point(&mut rng, f.dim()));
                let eps = rng.random_range(0.05..2.0);
                let (ga, gb) = (f.yosida_grad(&a, eps).unwrap(), f.yosida_grad(&b, eps).unwrap());
                assert!(dist2(&ga, &gb).sqrt() <= dist2(&a, &b).sqrt() / eps + 1e-10);
                let mono: f64 = ga.iter().zip(&gb).zip(a.iter().zip(&b)).map(|((p, q), (x, y))| (p - q) * (x - y)).sum();
                assert!(mono >= -1e-10);
                let (pa, pb) = (f.prox(&a, eps).unwrap(), f.prox(&b, eps).unwrap());
                assert!(dist2(&pa, &pb).sqrt() <= dist2(&a, &b).sqrt() + 1e-10);
            }
        }
    }

    #[test]
    fn separable_prox_is_coordinatewise() {
        let parts = vec![ConvexFunction::Abs, ConvexFunction::IndicatorAtMost { b: 0.25 }];
        let f = ConvexFunction::Separable(parts.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let y = point(&mut rng, 2);
            let eps = rng.random_range(0.05..2.0);
            let p = f.prox(&y, eps).unwrap();
            assert_eq!(p[0], parts[0].prox(&y[..1], eps).unwrap()[0]);
            assert_eq!(p[1], parts[1].prox(&y[1..], eps).unwrap()[0]);
        }
    }

    #[test]
    fn directional_derivatives_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for f in builtins() {
            for _ in 0..100 {
                let y = f.prox(&point(&mut rng, f.dim()), 1.0).unwrap();
                let z = point(&mut rng, f.dim());
                let (minus, plus) = f.dir_derivatives(&y, &z).unwrap();
                assert!(minus <= plus + 1e-8, "{f:?}");
                let neg: Vec<f64> = z.iter().map(|v| -v).collect();
                let (_, plus_neg) = f.dir_derivatives(&y, &neg).unwrap();
                if plus_neg.is_finite() {
                    assert!((minus + plus_neg).abs() <= 1e-10);
                }
            }
        }
        let f = ConvexFunction::IndicatorAtLeast { a: 0.0 };
        assert!(f.dir_derivatives(&[-1.0], &[1.0]).is_err());
        assert_eq!(f.subdifferential_1d(0.0).unwrap(), (f64::NEG_INFINITY, 0.0));
    }

    #[test]
    fn yosida_gradient_vanishes_at_minimizers() {
        for (f, y) in [
            (ConvexFunction::Abs, vec![0.0]),
            (ConvexFunction::IndicatorAtLeast { a: -1.0 }, vec![0.5]),
            (ConvexFunction::Quadratic { alpha: 2.0, center: vec![0.1] }, vec![0.1]),
        ] {
            for k in 1..20 {
                let g = f.yosida_grad(&y, (-(k as f64)).exp2()).unwrap();
                assert!(g[0].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn newton_prox_matches_optimality() {
        let f = quartic();
        for (y, eps) in [(2.0, 0.5), (-3.0, 2.0), (0.1, 0.01)] {
            let p = f.prox(&[y], eps).unwrap()[0];
            assert!(((p - y) / eps + p.powi(3) + p).abs() < 1e-9);
        }
        let q = smooth(1, |y| y[0] * y[0], |y, g| g[0] = 2.0 * y[0], |_, h| h[0] = 2.0);
        assert!((numeric_dir_plus(|v| q.value(v), &[1.0], &[1.0]) - 2.0).abs() < 1e-6);
        assert!((numeric_dir_plus(|v| v[0].abs(), &[0.0], &[-1.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compatibility_examples() {
        let driver = Driver::new(
            1,
            1,
            |_, _, y, _, o| o[0] = 0.5 - y[0],
            |_, _, y, o| o[0] = 0.5 - y[0],
            crate::backward::DriverConstants { mu_f: -1.0, ell_f: 0.0, b_f: 1.0, mu_g: -1.0, b_g: 1.0 },
        );
        let phi = ConvexFunction::IndicatorAtLeast { a: 0.0 };
        let psi = ConvexFunction::IndicatorAtMost { b: 1.0 };
        let kappa = TerminalCondition::new(1, |x, o| o[0] = 0.5 + 0.25 * x[0]);
        let dom = LevelSetDomain::interval(-1.0, 1.0).unwrap();
        let cfg = CompatConfig::new(vec![0.5], 1.0, 1.0);
        let report = check_compatibility(&driver, &phi, &psi, &kappa, &dom, &cfg, 1).unwrap();
        assert!(report.pass, "{report:?}");

        let bad = Driver::new(
            1,
            1,
            |_, _, y, _, o| o[0] = 0.5 - y[0],
            |_, _, y, o| o[0] = if y[0] < 0.0 { -1.0 } else { 0.5 - y[0] },
            crate::backward::DriverConstants { mu_f: -1.0, ell_f: 0.0, b_f: 1.0, mu_g: 0.0, b_g: 1.0 },
        );
        let report = check_compatibility(&bad, &phi, &psi, &kappa, &dom, &cfg, 1).unwrap();
        assert!(!report.pass);
        assert!(report.conditions.iter().any(|c| !c.pass && c.worst_margin < 0.0));
    }
}
