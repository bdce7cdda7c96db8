//! Small closed-form expression language used to describe coefficients,
//! drivers and terminal data in configuration files.
//!
//! Variables are `t`, `x0, x1, ...`, `y0, ...` and `z0, ...` (`z` is the
//! row-major `m x k` matrix flattened). Which ones exist depends on where
//! the expression is used.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backward::{Driver, DriverConstants, TerminalCondition};
use crate::error::{Error, Result};
use crate::forward::SdeCoefficients;

const MODULE: &str = "closed_form";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Expr {
    Const(f64),
    Var(String),
    Sum(Vec<Expr>),
    Product(Vec<Expr>),
    /// `sum_i coeffs[i] * of^i`.
    Poly { coeffs: Vec<f64>, of: Box<Expr> },
    Cos(Box<Expr>),
    Sin(Box<Expr>),
    Exp(Box<Expr>),
    Abs(Box<Expr>),
    Clip {
        of: Box<Expr>,
        #[serde(default)]
        lo: Option<f64>,
        #[serde(default)]
        hi: Option<f64>,
    },
    /// Sum of squares.
    Norm2(Vec<Expr>),
}

impl Expr {
    pub fn c(v: f64) -> Self {
        Expr::Const(v)
    }

    pub fn var(name: &str) -> Self {
        Expr::Var(name.to_string())
    }

    /// `a * of + b`.
    pub fn affine(a: f64, of: Expr, b: f64) -> Self {
        Expr::Poly { coeffs: vec![b, a], of: Box::new(of) }
    }
}

/// Which variables an expression may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub t: bool,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Env<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
}

#[derive(Debug, Clone)]
enum Node {
    Const(f64),
    T,
    X(usize),
    Y(usize),
    Z(usize),
    Sum(Vec<Node>),
    Product(Vec<Node>),
    Poly(Vec<f64>, Box<Node>),
    Cos(Box<Node>),
    Sin(Box<Node>),
    Exp(Box<Node>),
    Abs(Box<Node>),
    Clip(Box<Node>, f64, f64),
    Norm2(Vec<Node>),
}

/// An expression with its variables resolved.
#[derive(Debug, Clone)]
pub struct Compiled(Node);

impl Compiled {
    pub fn eval(&self, env: &Env) -> f64 {
        eval(&self.0, env)
    }
}

fn eval(n: &Node, e: &Env) -> f64 {
    match n {
        Node::Const(v) => *v,
        Node::T => e.t,
        Node::X(i) => e.x[*i],
        Node::Y(i) => e.y[*i],
        Node::Z(i) => e.z[*i],
        Node::Sum(v) => v.iter().map(|c| eval(c, e)).sum(),
        Node::Product(v) => v.iter().map(|c| eval(c, e)).product(),
        Node::Poly(c, of) => {
            let s = eval(of, e);
            c.iter().rev().fold(0.0, |acc, a| acc * s + a)
        }
        Node::Cos(a) => eval(a, e).cos(),
        Node::Sin(a) => eval(a, e).sin(),
        Node::Exp(a) => eval(a, e).exp(),
        Node::Abs(a) => eval(a, e).abs(),
        Node::Clip(a, lo, hi) => eval(a, e).max(*lo).min(*hi),
        Node::Norm2(v) => v.iter().map(|c| eval(c, e).powi(2)).sum(),
    }
}

fn index(name: &str, prefix: char, len: usize) -> Option<Result<usize>> {
    let rest = name.strip_prefix(prefix)?;
    let i: usize = match rest.parse() {
        Ok(i) => i,
        Err(_) => return Some(Err(Error::invalid_config(MODULE, format!("unknown variable `{name}`")))),
    };
    Some(if i < len {
        Ok(i)
    } else {
        Err(Error::invalid_config(MODULE, format!("variable `{name}` is not available here (only {len} of `{prefix}`)")))
    })
}

pub fn compile(expr: &Expr, layout: Layout) -> Result<Compiled> {
    fn go(e: &Expr, l: Layout) -> Result<Node> {
        let all = |v: &[Expr]| v.iter().map(|c| go(c, l)).collect::<Result<Vec<_>>>();
        Ok(match e {
            Expr::Const(v) => {
                if !v.is_finite() {
                    return Err(Error::invalid_config(MODULE, "constants must be finite"));
                }
                Node::Const(*v)
            }
            Expr::Var(name) => {
                let name = name.trim();
                if name == "t" {
                    if !l.t {
                        return Err(Error::invalid_config(MODULE, "variable `t` is not available here"));
                    }
                    Node::T
                } else if let Some(i) = index(name, 'x', l.x) {
                    Node::X(i?)
                } else if let Some(i) = index(name, 'y', l.y) {
                    Node::Y(i?)
                } else if let Some(i) = index(name, 'z', l.z) {
                    Node::Z(i?)
                } else {
                    return Err(Error::invalid_config(MODULE, format!("unknown variable `{name}`")));
                }
            }
            Expr::Sum(v) => Node::Sum(all(v)?),
            Expr::Product(v) => Node::Product(all(v)?),
            Expr::Poly { coeffs, of } => {
                if coeffs.iter().any(|c| !c.is_finite()) {
                    return Err(Error::invalid_config(MODULE, "polynomial coefficients must be finite"));
                }
                Node::Poly(coeffs.clone(), Box::new(go(of, l)?))
            }
            Expr::Cos(a) => Node::Cos(Box::new(go(a, l)?)),
            Expr::Sin(a) => Node::Sin(Box::new(go(a, l)?)),
            Expr::Exp(a) => Node::Exp(Box::new(go(a, l)?)),
            Expr::Abs(a) => Node::Abs(Box::new(go(a, l)?)),
            Expr::Clip { of, lo, hi } => {
                let (lo, hi) = (lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY));
                if lo > hi || lo.is_nan() || hi.is_nan() {
                    return Err(Error::invalid_config(MODULE, format!("clip needs lo <= hi, got [{lo}, {hi}]")));
                }
                Node::Clip(Box::new(go(of, l)?), lo, hi)
            }
            Expr::Norm2(v) => Node::Norm2(all(v)?),
        })
    }
    Ok(Compiled(go(expr, layout)?))
}

fn compile_all(exprs: &[Expr], layout: Layout, len: usize, what: &str) -> Result<Arc<Vec<Compiled>>> {
    if exprs.len() != len {
        return Err(Error::invalid_config(MODULE, format!("{what} needs {len} components, got {}", exprs.len())));
    }
    Ok(Arc::new(exprs.iter().map(|e| compile(e, layout)).collect::<Result<Vec<_>>>()?))
}

fn fill(parts: &[Compiled], env: &Env, out: &mut [f64]) {
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.eval(env);
    }
}

/// Drift (`d` entries) and row-major `d x k` diffusion over `(t, x)`.
pub fn sde_coefficients(
    drift: &[Expr],
    diffusion: &[Expr],
    dim: usize,
    k: usize,
    mu_f: f64,
    ell_g: f64,
) -> Result<SdeCoefficients> {
    let layout = Layout { t: true, x: dim, y: 0, z: 0 };
    let f = compile_all(drift, layout, dim, "drift")?;
    let g = compile_all(diffusion, layout, dim * k, "diffusion")?;
    Ok(SdeCoefficients::new(
        dim,
        k,
        move |t, x, out| fill(&f, &Env { t, x, y: &[], z: &[] }, out),
        move |t, x, out| fill(&g, &Env { t, x, y: &[], z: &[] }, out),
        mu_f,
        ell_g,
    ))
}

/// `F(t, x, y, z)` and `G(t, x, y)`, `m` components each.
pub fn driver(f: &[Expr], g: &[Expr], dim: usize, m: usize, k: usize, constants: DriverConstants) -> Result<Driver> {
    let fl = compile_all(f, Layout { t: true, x: dim, y: m, z: m * k }, m, "F")?;
    let gl = compile_all(g, Layout { t: true, x: dim, y: m, z: 0 }, m, "G")?;
    Ok(Driver::new(
        m,
        k,
        move |t, x, y, z, out| fill(&fl, &Env { t, x, y, z }, out),
        move |t, x, y, out| fill(&gl, &Env { t, x, y, z: &[] }, out),
        constants,
    ))
}

/// `kappa(x)`, `m` components.
pub fn terminal(kappa: &[Expr], dim: usize, m: usize) -> Result<TerminalCondition> {
    let k = compile_all(kappa, Layout { t: false, x: dim, y: 0, z: 0 }, m, "kappa")?;
    Ok(TerminalCondition::new(m, move |x, out| fill(&k, &Env { t: 0.0, x, y: &[], z: &[] }, out)))
}
