//! Experiment configuration: a TOML file with nested tables. Unknown keys
//! are rejected everywhere. Functions are composed from the closed-form
//! expression registry of `fkvi_core::closed_form`.

use std::path::Path;
use std::sync::Arc;

use fkvi_core::closed_form::{self, compile, Env, Expr, Layout};
use fkvi_core::convex::{smooth, SampleCounts};
use fkvi_core::geometry::BoundingBox;
use fkvi_core::{
    CompatConfig, ConvexFunction, Driver, DriverConstants, EllipticConfig, FdOptions, LevelSetDomain, Problem,
    SdeCoefficients, SolverOptions, TerminalCondition, TimeGrid,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: DomainSpec,
    pub forward: ForwardSpec,
    #[serde(default)]
    pub driver: Option<DriverSpec>,
    #[serde(default)]
    pub phi: Option<ConvexSpec>,
    #[serde(default)]
    pub psi: Option<ConvexSpec>,
    /// Terminal data, one expression per component of `Y`.
    #[serde(default)]
    pub kappa: Option<Vec<Expr>>,
    pub grid: GridSpec,
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub point: Option<PointSpec>,
    #[serde(default)]
    pub continuity: Option<ContinuitySpec>,
    #[serde(default)]
    pub elliptic: Option<EllipticSpec>,
    #[serde(default)]
    pub fd: Option<FdSpec>,
    #[serde(default)]
    pub residuals: Option<ResidualSpec>,
    #[serde(default)]
    pub compat: Option<CompatSpec>,
    #[serde(default)]
    pub checks: ChecksSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    Interval {
        a: f64,
        b: f64,
        #[serde(default)]
        boundary_tol: Option<f64>,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
        #[serde(default)]
        boundary_tol: Option<f64>,
    },
    /// Level function over `x0..`, its gradient and row-major Hessian.
    Custom {
        phi: Expr,
        grad: Vec<Expr>,
        hess: Vec<Expr>,
        lo: Vec<f64>,
        hi: Vec<f64>,
        #[serde(default)]
        boundary_tol: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardSpec {
    pub drift: Vec<Expr>,
    /// Row-major `d x k`.
    pub diffusion: Vec<Expr>,
    pub k: usize,
    #[serde(default)]
    pub mu_f: f64,
    #[serde(default = "one")]
    pub ell_g: f64,
    /// Penalty width; when set the penalization scheme replaces projection.
    #[serde(default)]
    pub penalty_eps: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSpec {
    pub m: usize,
    pub f: Vec<Expr>,
    pub g: Vec<Expr>,
    pub constants: DriverConstants,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConvexSpec {
    Zero { dim: usize },
    Quadratic { alpha: f64, center: Vec<f64> },
    IndicatorAtLeast { a: f64 },
    IndicatorAtMost { b: f64 },
    IndicatorBall { center: Vec<f64>, radius: f64 },
    Abs,
    Separable { parts: Vec<ConvexSpec> },
    /// Value, gradient and row-major Hessian over `y0..`.
    Smooth { value: Expr, grad: Vec<Expr>, hess: Vec<Expr> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    #[serde(default)]
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuitySpec {
    #[serde(default)]
    pub t: f64,
    pub x: Vec<f64>,
    #[serde(default)]
    pub dt: f64,
    #[serde(default)]
    pub dx: Vec<f64>,
    pub levels: usize,
    #[serde(default = "continuity_target")]
    pub target: f64,
}

impl ContinuitySpec {
    pub fn sequence(&self) -> fkvi_core::ContinuitySequence {
        fkvi_core::ContinuitySequence { t: self.t, x: self.x.clone(), dt: self.dt, dx: self.dx.clone(), levels: self.levels }
    }
}

fn continuity_target() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipticSpec {
    #[serde(default)]
    pub lambda: Option<f64>,
    pub tol: f64,
    #[serde(default = "n_max")]
    pub n_max: usize,
    pub steps_per_unit_time: usize,
    #[serde(default = "pilot")]
    pub pilot: usize,
    /// Decay table horizons `1..=table_max`.
    #[serde(default)]
    pub table_max: usize,
}

fn n_max() -> usize {
    40
}

fn pilot() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdSpec {
    pub space_nodes: usize,
    pub time_steps: usize,
    #[serde(default = "picard_sweeps")]
    pub picard_sweeps: usize,
    #[serde(default = "picard_tol")]
    pub picard_tol: f64,
    #[serde(default)]
    pub rannacher: bool,
    /// Also run Monte Carlo at `[point]` and report the difference.
    #[serde(default)]
    pub compare_mc: bool,
}

fn picard_sweeps() -> usize {
    3
}

fn picard_tol() -> f64 {
    1e-4
}

impl FdSpec {
    pub fn options(&self) -> FdOptions {
        FdOptions {
            picard_sweeps: self.picard_sweeps,
            picard_tol: self.picard_tol,
            rannacher: self.rannacher,
            ..FdOptions::new(self.space_nodes, self.time_steps)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResidualSpec {
    /// The `[fd]` reference grid.
    Fd,
    /// Monte Carlo values on a `time_nodes x space_nodes` grid.
    Mc { time_nodes: usize, space_nodes: usize, paths: usize },
    /// A closed-form candidate `u(t, x0)` on a uniform grid.
    Exact { u: Expr, time_nodes: usize, space_nodes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompatSpec {
    pub u0: Vec<f64>,
    pub c: f64,
    #[serde(default)]
    pub m_bound: Option<f64>,
    #[serde(default)]
    pub y_box: Option<f64>,
    #[serde(default = "one")]
    pub z_radius: f64,
    #[serde(default)]
    pub samples: Option<[usize; 5]>,
}

/// Structural constant checks run at load time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksSpec {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "check_samples")]
    pub samples: usize,
    #[serde(default = "check_box")]
    pub y_box: f64,
    #[serde(default = "check_box")]
    pub z_box: f64,
    #[serde(default = "check_slack")]
    pub slack: f64,
}

fn yes() -> bool {
    true
}

fn check_samples() -> usize {
    2000
}

fn check_box() -> f64 {
    5.0
}

fn check_slack() -> f64 {
    1e-9
}

impl Default for ChecksSpec {
    fn default() -> Self {
        ChecksSpec { enabled: true, samples: check_samples(), y_box: check_box(), z_box: check_box(), slack: check_slack() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Paths written to `bundle.csv`; all when absent.
    #[serde(default)]
    pub csv_paths: Option<usize>,
    /// Also write `bundle.bin`.
    #[serde(default)]
    pub binary: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn domain(&self) -> Result<LevelSetDomain, CliError> {
        let (dom, tol) = match &self.domain {
            DomainSpec::Interval { a, b, boundary_tol } => (LevelSetDomain::interval(*a, *b)?, *boundary_tol),
            DomainSpec::Ball { center, radius, boundary_tol } => (LevelSetDomain::ball(center.clone(), *radius)?, *boundary_tol),
            DomainSpec::Custom { phi, grad, hess, lo, hi, boundary_tol } => {
                let d = lo.len();
                let layout = Layout { t: false, x: d, y: 0, z: 0 };
                let phi = compile(phi, layout)?;
                let grad = compile_vec(grad, layout, d, "domain.grad")?;
                let hess = compile_vec(hess, layout, d * d, "domain.hess")?;
                let dom = LevelSetDomain::custom(
                    Arc::new(move |x: &[f64]| phi.eval(&env_x(x))),
                    Arc::new(move |x: &[f64], out: &mut [f64]| fill(&grad, &env_x(x), out)),
                    Arc::new(move |x: &[f64], out: &mut [f64]| fill(&hess, &env_x(x), out)),
                    BoundingBox { lo: lo.clone(), hi: hi.clone() },
                )?;
                (dom, *boundary_tol)
            }
        };
        Ok(match tol {
            Some(t) => dom.with_boundary_tol(t),
            None => dom,
        })
    }

    pub fn dim(&self) -> usize {
        match &self.domain {
            DomainSpec::Interval { .. } => 1,
            DomainSpec::Ball { center, .. } => center.len(),
            DomainSpec::Custom { lo, .. } => lo.len(),
        }
    }

    pub fn coefficients(&self) -> Result<SdeCoefficients, CliError> {
        let f = &self.forward;
        Ok(closed_form::sde_coefficients(&f.drift, &f.diffusion, self.dim(), f.k, f.mu_f, f.ell_g)?)
    }

    pub fn scheme(&self) -> fkvi_core::ReflectionScheme {
        match self.forward.penalty_eps {
            Some(eps) => fkvi_core::ReflectionScheme::Penalization { eps },
            None => fkvi_core::ReflectionScheme::Projection,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        Ok(TimeGrid::uniform(self.grid.horizon, self.grid.steps)?)
    }

    fn driver_spec(&self) -> Result<&DriverSpec, CliError> {
        self.driver.as_ref().ok_or_else(|| CliError::Config("config: missing [driver]".into()))
    }

    pub fn driver(&self) -> Result<Driver, CliError> {
        let d = self.driver_spec()?;
        Ok(closed_form::driver(&d.f, &d.g, self.dim(), d.m, self.forward.k, d.constants)?)
    }

    pub fn m(&self) -> Result<usize, CliError> {
        Ok(self.driver_spec()?.m)
    }

    pub fn phi(&self) -> Result<ConvexFunction, CliError> {
        convex_or_zero(self.phi.as_ref(), self.m()?)
    }

    pub fn psi(&self) -> Result<ConvexFunction, CliError> {
        convex_or_zero(self.psi.as_ref(), self.m()?)
    }

    pub fn kappa(&self) -> Result<TerminalCondition, CliError> {
        let kappa = self.kappa.as_ref().ok_or_else(|| CliError::Config("config: missing kappa".into()))?;
        Ok(closed_form::terminal(kappa, self.dim(), self.m()?)?)
    }

    pub fn problem(&self) -> Result<Problem, CliError> {
        Ok(Problem {
            domain: self.domain()?,
            coeffs: self.coefficients()?,
            driver: self.driver()?,
            phi: self.phi()?,
            psi: self.psi()?,
            kappa: self.kappa()?,
            grid: self.grid()?,
            options: self.solver,
        })
    }

    pub fn point(&self) -> Result<&PointSpec, CliError> {
        self.point.as_ref().ok_or_else(|| CliError::Config("config: missing [point]".into()))
    }

    pub fn elliptic_config(&self) -> Result<(EllipticConfig, usize), CliError> {
        let spec = self.elliptic.as_ref().ok_or_else(|| CliError::Config("config: missing [elliptic]".into()))?;
        let mut cfg = EllipticConfig::new(
            self.domain()?,
            self.coefficients()?,
            self.driver()?,
            spec.lambda,
            spec.tol,
            spec.steps_per_unit_time,
        )?;
        cfg.n_max = spec.n_max;
        cfg.pilot = spec.pilot;
        cfg.options = self.solver;
        Ok((cfg, spec.table_max))
    }

    pub fn compat_config(&self) -> Result<CompatConfig, CliError> {
        let spec = self.compat.as_ref().ok_or_else(|| CliError::Config("config: missing [compat]".into()))?;
        let mut cfg = CompatConfig::new(spec.u0.clone(), spec.c, self.grid.horizon);
        cfg.m_bound = spec.m_bound;
        if let Some(b) = spec.y_box {
            cfg.y_box = b;
        }
        cfg.z_radius = spec.z_radius;
        if let Some([y, eps, t, x, z]) = spec.samples {
            cfg.samples = SampleCounts { y, eps, t, x, z };
        }
        Ok(cfg)
    }

    /// Sampled structural checks of the coefficients and, when present,
    /// the driver. The first violation is returned with its witness.
    pub fn check_structure(&self) -> Result<(), CliError> {
        let c = self.checks;
        if !c.enabled {
            return Ok(());
        }
        let domain = self.domain()?;
        let seed = self.ensemble.seed;
        let rep = self.coefficients()?.check_structure(&domain, self.grid.horizon, c.samples, seed)?;
        if rep.monotonicity_margin < -c.slack {
            return Err(CliError::Config(format!(
                "[forward] drift is not monotone with mu_f = {}: margin {} at {}",
                self.forward.mu_f, rep.monotonicity_margin, rep.monotonicity_witness
            )));
        }
        if rep.lipschitz_margin < -c.slack {
            return Err(CliError::Config(format!(
                "[forward] diffusion is not Lipschitz with ell_g = {}: margin {} at {}",
                self.forward.ell_g, rep.lipschitz_margin, rep.lipschitz_witness
            )));
        }
        if self.driver.is_some() {
            let rep = self.driver()?.check_structure(&domain, self.grid.horizon, c.y_box, c.z_box, c.samples, seed);
            if let Some((label, margin, witness)) = rep.first_violation(c.slack) {
                return Err(CliError::Config(format!("[driver] {label} violated: margin {margin} at {witness}")));
            }
        }
        Ok(())
    }
}

fn env_x(x: &[f64]) -> Env<'_> {
    Env { t: 0.0, x, y: &[], z: &[] }
}

fn fill(parts: &[closed_form::Compiled], env: &Env, out: &mut [f64]) {
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.eval(env);
    }
}

fn compile_vec(exprs: &[Expr], layout: Layout, len: usize, what: &str) -> Result<Vec<closed_form::Compiled>, CliError> {
    if exprs.len() != len {
        return Err(CliError::Config(format!("config: {what} needs {len} entries, got {}", exprs.len())));
    }
    Ok(exprs.iter().map(|e| compile(e, layout)).collect::<Result<Vec<_>, _>>()?)
}

fn convex_or_zero(spec: Option<&ConvexSpec>, m: usize) -> Result<ConvexFunction, CliError> {
    let f = match spec {
        None => ConvexFunction::zero(m),
        Some(s) => convex(s)?,
    };
    if f.dim() != m {
        return Err(CliError::Config(format!("config: convex function has dimension {}, Y has {m}", f.dim())));
    }
    Ok(f)
}

pub fn convex(spec: &ConvexSpec) -> Result<ConvexFunction, CliError> {
    let f = match spec {
        ConvexSpec::Zero { dim } => ConvexFunction::zero(*dim),
        ConvexSpec::Quadratic { alpha, center } => ConvexFunction::Quadratic { alpha: *alpha, center: center.clone() },
        ConvexSpec::IndicatorAtLeast { a } => ConvexFunction::IndicatorAtLeast { a: *a },
        ConvexSpec::IndicatorAtMost { b } => ConvexFunction::IndicatorAtMost { b: *b },
        ConvexSpec::IndicatorBall { center, radius } => ConvexFunction::IndicatorBall { center: center.clone(), radius: *radius },
        ConvexSpec::Abs => ConvexFunction::Abs,
        ConvexSpec::Separable { parts } => ConvexFunction::Separable(parts.iter().map(convex).collect::<Result<_, _>>()?),
        ConvexSpec::Smooth { value, grad, hess } => {
            let m = grad.len();
            let layout = Layout { t: false, x: 0, y: m, z: 0 };
            let value = compile(value, layout)?;
            let grad = compile_vec(grad, layout, m, "smooth grad")?;
            let hess = compile_vec(hess, layout, m * m, "smooth hess")?;
            smooth(
                m,
                move |y| value.eval(&Env { t: 0.0, x: &[], y, z: &[] }),
                move |y, out| fill(&grad, &Env { t: 0.0, x: &[], y, z: &[] }, out),
                move |y, out| fill(&hess, &Env { t: 0.0, x: &[], y, z: &[] }, out),
            )
        }
    };
    f.validate()?;
    Ok(f)
}
