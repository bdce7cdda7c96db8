//! Bounded domains described by a level function `phi` with `D = {phi < 0}`.
//!
//! The built-in interval and ball use `phi(x) = (|x - c|^2 - R^2) / (2R)`, so
//! the gradient `(x - c) / R` has unit length on the boundary and is the
//! outward normal there. Custom domains supply `phi`, its gradient and its
//! Hessian as callbacks.

use std::fmt;
use std::sync::Arc;

use crate::error::{ensure_finite, Error, Result};

const MODULE: &str = "geometry";

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Writes the field value into the output slice.
pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn diameter(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt()
    }

    /// Box grown by one box-width on every side.
    fn inflated_contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= a - (b - a) && *v <= b + (b - a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointClass {
    Interior,
    Boundary,
    Exterior,
}

#[derive(Clone)]
enum Shape {
    /// Ball `|x - c| < R`; the interval is the `d = 1` case.
    Ball { center: Vec<f64>, radius: f64 },
    Custom {
        phi: ScalarField,
        grad: VectorField,
        hess: VectorField,
    },
}

#[derive(Clone)]
pub struct LevelSetDomain {
    dim: usize,
    shape: Shape,
    bounding_box: BoundingBox,
    boundary_tol: f64,
    kind: &'static str,
}

impl fmt::Debug for LevelSetDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("LevelSetDomain");
        s.field("kind", &self.kind).field("dim", &self.dim);
        if let Shape::Ball { center, radius } = &self.shape {
            s.field("center", center).field("radius", radius);
        }
        s.field("bounding_box", &self.bounding_box)
            .field("boundary_tol", &self.boundary_tol)
            .finish()
    }
}

/// Newton projection settings for custom domains.
const PROJECT_MAX_ITER: usize = 50;
const PROJECT_TOL: f64 = 1e-12;

impl LevelSetDomain {
    /// Interval `(a, b)` in one dimension.
    pub fn interval(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::invalid_input(MODULE, format!("interval needs a < b, got [{a}, {b}]")));
        }
        let mut d = Self::ball(vec![0.5 * (a + b)], 0.5 * (b - a))?;
        d.kind = "interval";
        Ok(d)
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::invalid_input(MODULE, "ball needs dimension >= 1"));
        }
        ensure_finite(MODULE, "ball center", &center)?;
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::invalid_input(MODULE, format!("ball radius must be positive, got {radius}")));
        }
        let bounding_box = BoundingBox {
            lo: center.iter().map(|c| c - radius).collect(),
            hi: center.iter().map(|c| c + radius).collect(),
        };
        let boundary_tol = 1e-8 * bounding_box.diameter();
        Ok(LevelSetDomain {
            dim: center.len(),
            shape: Shape::Ball { center, radius },
            bounding_box,
            boundary_tol,
            kind: "ball",
        })
    }

    /// Domain from user callbacks. `hess` writes a row-major `d x d` matrix.
    /// The caller guarantees `{phi < 0}` is contained in `bounding_box`; the
    /// level function is only ever evaluated near that box.
    pub fn custom(phi: ScalarField, grad: VectorField, hess: VectorField, bounding_box: BoundingBox) -> Result<Self> {
        let dim = bounding_box.lo.len();
        if dim == 0 || bounding_box.hi.len() != dim {
            return Err(Error::invalid_input(MODULE, "bounding box dimensions mismatch"));
        }
        if bounding_box.lo.iter().zip(&bounding_box.hi).any(|(a, b)| !(a < b)) {
            return Err(Error::invalid_input(MODULE, "bounding box must have lo < hi"));
        }
        let boundary_tol = 1e-8 * bounding_box.diameter();
        Ok(LevelSetDomain {
            dim,
            shape: Shape::Custom { phi, grad, hess },
            bounding_box,
            boundary_tol,
            kind: "custom",
        })
    }

    pub fn with_boundary_tol(mut self, tol: f64) -> Self {
        self.boundary_tol = tol.max(0.0);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounding_box(&self) -> &BoundingBox {
        &self.bounding_box
    }

    pub fn boundary_tol(&self) -> f64 {
        self.boundary_tol
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid_input(MODULE, format!("expected a {}-dimensional point, got {}", self.dim, x.len())));
        }
        ensure_finite(MODULE, "point", x)
    }

    pub fn eval_phi(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.phi(x))
    }

    pub fn grad_phi(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut g = vec![0.0; self.dim];
        self.grad_into(x, &mut g);
        Ok(g)
    }

    /// Row-major Hessian.
    pub fn hess_phi(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut h = vec![0.0; self.dim * self.dim];
        self.hess_into(x, &mut h);
        Ok(h)
    }

    pub fn classify(&self, x: &[f64]) -> Result<PointClass> {
        self.check(x)?;
        Ok(self.classify_unchecked(x))
    }

    /// Closest point of the closure and the distance moved.
    pub fn project_to_closure(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(x)?;
        let mut y = x.to_vec();
        let delta = self.project_in_place(&mut y)?;
        Ok((y, delta))
    }

    pub fn contains_closure(&self, x: &[f64]) -> bool {
        x.len() == self.dim && self.phi(x) <= self.boundary_tol
    }

    // Unchecked fast paths used by the simulators.

    pub(crate) fn phi(&self, x: &[f64]) -> f64 {
        match &self.shape {
            Shape::Ball { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                (r2 - radius * radius) / (2.0 * radius)
            }
            Shape::Custom { phi, .. } => phi(x),
        }
    }

    pub(crate) fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.shape {
            Shape::Ball { center, radius } => {
                for ((o, a), c) in out.iter_mut().zip(x).zip(center) {
                    *o = (a - c) / radius;
                }
            }
            Shape::Custom { grad, .. } => grad(x, out),
        }
    }

    pub(crate) fn hess_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.shape {
            Shape::Ball { radius, .. } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..self.dim {
                    out[i * self.dim + i] = 1.0 / radius;
                }
            }
            Shape::Custom { hess, .. } => hess(x, out),
        }
    }

    pub(crate) fn classify_unchecked(&self, x: &[f64]) -> PointClass {
        let p = self.phi(x);
        if p.abs() <= self.boundary_tol {
            PointClass::Boundary
        } else if p < 0.0 {
            PointClass::Interior
        } else {
            PointClass::Exterior
        }
    }

    /// Projects `x` onto the closure in place and returns the displacement.
    pub(crate) fn project_in_place(&self, x: &mut [f64]) -> Result<f64> {
        match &self.shape {
            Shape::Ball { center, radius } => {
                let r = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
                // points that are on the sphere up to rounding stay put, so
                // projection is idempotent
                if r <= *radius * (1.0 + 4.0 * f64::EPSILON) {
                    return Ok(0.0);
                }
                let scale = radius / r;
                for (a, c) in x.iter_mut().zip(center) {
                    *a = c + (*a - c) * scale;
                }
                Ok(r - radius)
            }
            Shape::Custom { .. } => self.newton_project(x),
        }
    }

    /// Damped Newton on `phi(y) = 0` along the gradient direction.
    fn newton_project(&self, x: &mut [f64]) -> Result<f64> {
        if self.phi(x) <= 0.0 {
            return Ok(0.0);
        }
        if !self.bounding_box.inflated_contains(x) {
            return Err(Error::numeric(MODULE, format!("projection started too far from the domain at {:?}", x)));
        }
        let start = x.to_vec();
        let mut g = vec![0.0; self.dim];
        let mut trial = vec![0.0; self.dim];
        let mut p = self.phi(x);
        for _ in 0..PROJECT_MAX_ITER {
            if p <= 0.0 && p.abs() <= PROJECT_TOL {
                break;
            }
            self.grad_into(x, &mut g);
            let g2: f64 = g.iter().map(|v| v * v).sum();
            if g2 <= f64::EPSILON {
                return Err(Error::numeric(MODULE, format!("vanishing gradient during projection at {:?}", x)));
            }
            let mut step = 1.0;
            loop {
                for i in 0..self.dim {
                    trial[i] = x[i] - step * p / g2 * g[i];
                }
                let pt = self.phi(&trial);
                if pt.abs() < p.abs() || step < 1e-6 {
                    x.copy_from_slice(&trial);
                    p = pt;
                    break;
                }
                step *= 0.5;
            }
        }
        // within PROJECT_TOL outside still counts as on the boundary
        if p > PROJECT_TOL {
            return Err(Error::numeric(
                MODULE,
                format!("projection did not converge in {PROJECT_MAX_ITER} iterations; last iterate {:?}, phi {p:e}", x),
            ));
        }
        Ok(start.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_disc() -> LevelSetDomain {
        LevelSetDomain::ball(vec![0.0, 0.0], 1.0).unwrap()
    }

    fn custom_disc() -> LevelSetDomain {
        LevelSetDomain::custom(
            Arc::new(|x: &[f64]| (x[0] * x[0] + x[1] * x[1] - 1.0) / 2.0),
            Arc::new(|x: &[f64], g: &mut [f64]| g.copy_from_slice(x)),
            Arc::new(|_: &[f64], h: &mut [f64]| h.copy_from_slice(&[1.0, 0.0, 0.0, 1.0])),
            BoundingBox { lo: vec![-1.0, -1.0], hi: vec![1.0, 1.0] },
        )
        .unwrap()
    }

    #[test]
    fn phi_values() {
        let d = unit_disc();
        assert_eq!(d.eval_phi(&[0.0, 0.0]).unwrap(), -0.5);
        assert_eq!(d.eval_phi(&[1.0, 0.0]).unwrap(), 0.0);
        let i = LevelSetDomain::interval(-1.0, 1.0).unwrap();
        assert_eq!(i.eval_phi(&[2.0]).unwrap(), 1.5);
        assert!(d.eval_phi(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn gradients() {
        let d = unit_disc();
        assert_eq!(d.grad_phi(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(d.grad_phi(&[0.3, 0.4]).unwrap(), vec![0.3, 0.4]);
        let i = LevelSetDomain::interval(-1.0, 1.0).unwrap();
        assert_eq!(i.grad_phi(&[-1.0]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn projections() {
        let d = unit_disc();
        assert_eq!(d.project_to_closure(&[2.0, 0.0]).unwrap(), (vec![1.0, 0.0], 1.0));
        assert_eq!(d.project_to_closure(&[0.2, 0.1]).unwrap(), (vec![0.2, 0.1], 0.0));
        let i = LevelSetDomain::interval(-1.0, 1.0).unwrap();
        assert_eq!(i.project_to_closure(&[1.25]).unwrap(), (vec![1.0], 0.25));
    }

    #[test]
    fn classification() {
        let d = unit_disc().with_boundary_tol(1e-8);
        assert_eq!(d.classify(&[1.0, 0.0]).unwrap(), PointClass::Boundary);
        assert_eq!(d.classify(&[0.0, 0.0]).unwrap(), PointClass::Interior);
        assert_eq!(d.classify(&[3.0, 0.0]).unwrap(), PointClass::Exterior);
    }

    #[test]
    fn default_tolerance_scales_with_box() {
        let d = LevelSetDomain::ball(vec![0.0], 10.0).unwrap();
        assert!((d.boundary_tol() - 2e-7).abs() < 1e-20);
    }

    #[test]
    fn boundary_gradient_has_unit_norm() {
        let mut rng = crate::rng::uniform_stream(11, 0);
        use rand::Rng;
        let domains = [
            LevelSetDomain::interval(-2.0, 0.5).unwrap(),
            LevelSetDomain::ball(vec![0.5, -1.0, 2.0], 1.7).unwrap(),
            LevelSetDomain::ball(vec![0.0, 0.0], 0.3).unwrap(),
        ];
        for d in &domains {
            let Shape::Ball { center, radius } = &d.shape else { unreachable!() };
            for _ in 0..1000 {
                let mut dir: Vec<f64> = (0..d.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < 1e-3 {
                    continue;
                }
                dir.iter_mut().for_each(|v| *v /= n);
                let x: Vec<f64> = center.iter().zip(&dir).map(|(c, u)| c + radius * u).collect();
                let g = d.grad_phi(&x).unwrap();
                let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((gn - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let d = LevelSetDomain::ball(vec![0.2, -0.1], 0.9).unwrap();
        let x = [0.4, 0.3];
        let h = 1e-4;
        let g = d.grad_phi(&x).unwrap();
        let hs = d.hess_phi(&x).unwrap();
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (d.phi(&xp) - d.phi(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
            let gp = d.grad_phi(&xp).unwrap();
            let gm = d.grad_phi(&xm).unwrap();
            for j in 0..2 {
                assert!(((gp[j] - gm[j]) / (2.0 * h) - hs[j * 2 + i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn custom_projection_agrees_with_closed_form() {
        let c = custom_disc();
        let b = unit_disc();
        for x in [[1.5, 0.3], [-0.9, 1.2], [0.1, -1.05]] {
            let (pc, dc) = c.project_to_closure(&x).unwrap();
            let (pb, db) = b.project_to_closure(&x).unwrap();
            assert!((dc - db).abs() < 1e-10);
            assert!(pc.iter().zip(&pb).all(|(a, b)| (a - b).abs() < 1e-10));
        }
        assert!(c.project_to_closure(&[10.0, 10.0]).unwrap_err().is_numeric());
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(x in -1.9f64..1.9, y in -1.9f64..1.9) {
            let d = unit_disc();
            let (p, _) = d.project_to_closure(&[x, y]).unwrap();
            let (q, delta) = d.project_to_closure(&p).unwrap();
            prop_assert_eq!(delta, 0.0);
            prop_assert_eq!(p, q);
        }

        #[test]
        fn displacement_is_normal(x in -3.0f64..3.0, y in -3.0f64..3.0) {
            let d = unit_disc();
            prop_assume!(x * x + y * y > 1.01);
            let (p, delta) = d.project_to_closure(&[x, y]).unwrap();
            let g = d.grad_phi(&p).unwrap();
            let dir = [(x - p[0]) / delta, (y - p[1]) / delta];
            let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
            prop_assert!((dir[0] * g[0] + dir[1] * g[1]) / gn >= 1.0 - 1e-9);
        }
    }
}
