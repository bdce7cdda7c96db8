//! Least-squares conditional expectations on the cross-section of paths.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MODULE: &str = "regression";
/// Rows per Gram-assembly chunk; fixed so sums do not depend on thread count.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisKind {
    /// Monomials of total degree `<= degree` in the rescaled state.
    Polynomial { degree: usize },
    /// Equal-mass bins on the sorted one-dimensional state.
    Bins { count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "BasisRepr", from = "BasisRepr")]
pub struct RegressionBasis {
    pub kind: BasisKind,
    /// Tikhonov weight relative to the mean diagonal of the Gram matrix.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    1e-10
}

// Flat on-disk form `{ kind = "...", <params>, ridge = ... }`. serde's
// `flatten` cannot be combined with rejection of unknown keys.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum BasisRepr {
    Polynomial {
        degree: usize,
        #[serde(default = "default_ridge")]
        ridge: f64,
    },
    Bins {
        count: usize,
        #[serde(default)]
        ridge: f64,
    },
}

impl From<RegressionBasis> for BasisRepr {
    fn from(b: RegressionBasis) -> Self {
        match b.kind {
            BasisKind::Polynomial { degree } => BasisRepr::Polynomial { degree, ridge: b.ridge },
            BasisKind::Bins { count } => BasisRepr::Bins { count, ridge: b.ridge },
        }
    }
}

impl From<BasisRepr> for RegressionBasis {
    fn from(r: BasisRepr) -> Self {
        match r {
            BasisRepr::Polynomial { degree, ridge } => RegressionBasis { kind: BasisKind::Polynomial { degree }, ridge },
            BasisRepr::Bins { count, ridge } => RegressionBasis { kind: BasisKind::Bins { count }, ridge },
        }
    }
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis { kind: BasisKind::Polynomial { degree: 3 }, ridge: default_ridge() }
    }
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        RegressionBasis { kind: BasisKind::Polynomial { degree }, ridge: default_ridge() }
    }

    pub fn bins(count: usize) -> Self {
        RegressionBasis { kind: BasisKind::Bins { count }, ridge: 0.0 }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    /// Prepares the estimator for the cross-section `states` (`rows x dim`,
    /// row-major).
    pub fn design(&self, states: &[f64], rows: usize, dim: usize) -> Result<Design> {
        if rows == 0 || states.len() != rows * dim {
            return Err(Error::invalid_input(MODULE, "state matrix shape mismatch"));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::invalid_input(MODULE, "ridge must be nonnegative"));
        }
        let first = &states[..dim];
        if states.chunks_exact(dim).all(|r| r == first) {
            return Ok(Design { rows, inner: Inner::Constant });
        }
        match self.kind {
            BasisKind::Polynomial { degree } => polynomial_design(states, rows, dim, degree, self.ridge),
            BasisKind::Bins { count } => {
                if dim != 1 {
                    return Err(Error::invalid_input(MODULE, "bin regression needs a one-dimensional state"));
                }
                if count == 0 {
                    return Err(Error::invalid_input(MODULE, "bin count must be positive"));
                }
                let mut order: Vec<usize> = (0..rows).collect();
                order.sort_by(|&a, &b| states[a].total_cmp(&states[b]).then(a.cmp(&b)));
                let count = count.min(rows);
                let mut bin_of = vec![0usize; rows];
                for (rank, &i) in order.iter().enumerate() {
                    bin_of[i] = rank * count / rows;
                }
                Ok(Design { rows, inner: Inner::Bins { bin_of, count } })
            }
        }
    }
}

/// Diagnostics of one regression design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DesignInfo {
    pub functions: usize,
    /// Ratio of extreme squared Cholesky pivots, a cheap condition estimate.
    pub condition: f64,
}

pub struct Design {
    rows: usize,
    inner: Inner,
}

enum Inner {
    Constant,
    Poly {
        /// `rows x p`, row-major.
        features: Vec<f64>,
        p: usize,
        chol: Cholesky<f64, Dyn>,
        condition: f64,
    },
    Bins {
        bin_of: Vec<usize>,
        count: usize,
    },
}

fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; dim]];
    for total in 1..=degree {
        let mut current = vec![0usize; dim];
        fill_exponents(&mut out, &mut current, 0, total);
    }
    out
}

fn fill_exponents(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        fill_exponents(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

fn polynomial_design(states: &[f64], rows: usize, dim: usize, degree: usize, ridge: f64) -> Result<Design> {
    // rescale each coordinate to [-1, 1]; constant coordinates drop out
    let mut center = vec![0.0; dim];
    let mut half = vec![0.0; dim];
    for j in 0..dim {
        let (lo, hi) = states
            .chunks_exact(dim)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| (l.min(r[j]), h.max(r[j])));
        center[j] = 0.5 * (lo + hi);
        half[j] = 0.5 * (hi - lo);
    }
    let active: Vec<usize> = (0..dim).filter(|&j| half[j] > 0.0).collect();
    let exps = monomial_exponents(active.len(), degree);
    let p = exps.len();
    if p > rows {
        return Err(Error::numeric(MODULE, format!("{rows} samples cannot identify {p} basis functions")));
    }
    let mut features = vec![0.0; rows * p];
    features.par_chunks_mut(p).zip(states.par_chunks(dim)).for_each(|(f, s)| {
        let z: Vec<f64> = active.iter().map(|&j| (s[j] - center[j]) / half[j]).collect();
        for (col, e) in exps.iter().enumerate() {
            f[col] = e.iter().zip(&z).map(|(&k, v)| v.powi(k as i32)).product();
        }
    });
    let gram_parts: Vec<Vec<f64>> = features
        .par_chunks(CHUNK * p)
        .map(|block| {
            let mut g = vec![0.0; p * p];
            for row in block.chunks_exact(p) {
                for a in 0..p {
                    for b in 0..=a {
                        g[a * p + b] += row[a] * row[b];
                    }
                }
            }
            g
        })
        .collect();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    for part in &gram_parts {
        for a in 0..p {
            for b in 0..=a {
                gram[(a, b)] += part[a * p + b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let mean_diag = gram.diagonal().sum() / p as f64;
    for a in 0..p {
        gram[(a, a)] += ridge * mean_diag;
    }
    let chol = Cholesky::new(gram)
        .ok_or_else(|| Error::numeric(MODULE, format!("regression Gram matrix is not positive definite ({p} functions)")))?;
    let diag = chol.l_dirty().diagonal();
    let (dmin, dmax) = diag.iter().fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(v * v), h.max(v * v)));
    if !(dmin > 1e-13 * dmax) {
        return Err(Error::numeric(MODULE, format!("rank-deficient regression design (pivot ratio {:e})", dmin / dmax)));
    }
    Ok(Design { rows, inner: Inner::Poly { features, p, chol, condition: dmax / dmin } })
}

impl Design {
    pub fn info(&self) -> DesignInfo {
        match &self.inner {
            Inner::Constant => DesignInfo { functions: 1, condition: 1.0 },
            Inner::Poly { p, condition, .. } => DesignInfo { functions: *p, condition: *condition },
            Inner::Bins { count, .. } => DesignInfo { functions: *count, condition: 1.0 },
        }
    }

    /// Fitted values for `cols` targets stored row-major in `targets`
    /// (`rows x cols`). Targets are shifted by their first row before
    /// fitting, so constant columns are reproduced exactly.
    pub fn fit(&self, targets: &[f64], cols: usize) -> Vec<f64> {
        let rows = self.rows;
        debug_assert_eq!(targets.len(), rows * cols);
        let reference: Vec<f64> = targets[..cols].to_vec();
        let mut out = vec![0.0; rows * cols];
        match &self.inner {
            Inner::Constant => {
                for c in 0..cols {
                    let mean = ordered_sum((0..rows).map(|r| targets[r * cols + c] - reference[c])) / rows as f64;
                    for r in 0..rows {
                        out[r * cols + c] = reference[c] + mean;
                    }
                }
            }
            Inner::Bins { bin_of, count } => {
                let mut sums = vec![0.0; count * cols];
                let mut counts = vec![0usize; *count];
                for r in 0..rows {
                    counts[bin_of[r]] += 1;
                    for c in 0..cols {
                        sums[bin_of[r] * cols + c] += targets[r * cols + c] - reference[c];
                    }
                }
                for r in 0..rows {
                    let b = bin_of[r];
                    for c in 0..cols {
                        out[r * cols + c] = reference[c] + sums[b * cols + c] / counts[b] as f64;
                    }
                }
            }
            Inner::Poly { features, p, chol, .. } => {
                let p = *p;
                let parts: Vec<Vec<f64>> = features
                    .par_chunks(CHUNK * p)
                    .zip(targets.par_chunks(CHUNK * cols))
                    .map(|(fb, tb)| {
                        let mut rhs = vec![0.0; p * cols];
                        for (f, t) in fb.chunks_exact(p).zip(tb.chunks_exact(cols)) {
                            for c in 0..cols {
                                let y = t[c] - reference[c];
                                if y != 0.0 {
                                    for a in 0..p {
                                        rhs[c * p + a] += f[a] * y;
                                    }
                                }
                            }
                        }
                        rhs
                    })
                    .collect();
                for c in 0..cols {
                    let mut rhs = DVector::<f64>::zeros(p);
                    for part in &parts {
                        for a in 0..p {
                            rhs[a] += part[c * p + a];
                        }
                    }
                    let beta = chol.solve(&rhs);
                    out.par_chunks_mut(cols).zip(features.par_chunks(p)).for_each(|(o, f)| {
                        o[c] = reference[c] + f.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>();
                    });
                }
            }
        }
        out
    }
}

/// Neumaier-compensated sum in iteration order.
pub fn ordered_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_targets_are_exact() {
        let states: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin()).collect();
        let design = RegressionBasis::polynomial(3).design(&states, 500, 1).unwrap();
        let targets = vec![0.1 + 0.2; 500];
        let fit = design.fit(&targets, 1);
        assert!(fit.iter().all(|v| *v == 0.1 + 0.2));
    }

    #[test]
    fn reproduces_polynomials() {
        let rows = 300;
        let states: Vec<f64> = (0..rows * 2).map(|i| ((i as f64 * 12.9898).sin() * 43758.5453).fract()).collect();
        let targets: Vec<f64> = states.chunks(2).map(|s| 1.0 + 2.0 * s[0] - s[1] * s[1] + s[0] * s[1]).collect();
        let design = RegressionBasis::polynomial(2).with_ridge(0.0).design(&states, rows, 2).unwrap();
        assert_eq!(design.info().functions, 6);
        let fit = design.fit(&targets, 1);
        for (a, b) in fit.iter().zip(&targets) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_states_fall_back_to_mean() {
        let states = vec![0.5; 4];
        let design = RegressionBasis::polynomial(3).design(&states, 4, 1).unwrap();
        let fit = design.fit(&[1.0, 2.0, 3.0, 6.0], 1);
        assert!(fit.iter().all(|v| (*v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn underdetermined_design_is_rejected() {
        let states = vec![0.0, 1.0];
        let err = RegressionBasis::polynomial(3).with_ridge(0.0).design(&states, 2, 1).err().unwrap();
        assert!(err.is_numeric());
    }

    #[test]
    fn bins_average_within_bins() {
        let states = vec![0.4, -1.0, 0.9, -0.2];
        let design = RegressionBasis::bins(2).design(&states, 4, 1).unwrap();
        let fit = design.fit(&[1.0, 10.0, 3.0, 20.0], 1);
        assert_eq!(fit, vec![2.0, 15.0, 2.0, 15.0]);
    }

    #[test]
    fn monomials_count() {
        assert_eq!(monomial_exponents(1, 3).len(), 4);
        assert_eq!(monomial_exponents(2, 3).len(), 10);
        assert_eq!(monomial_exponents(3, 2).len(), 10);
    }
}
