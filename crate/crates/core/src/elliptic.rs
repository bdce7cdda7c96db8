//! Infinite-horizon problems with zero terminal data, approximated by
//! finite horizons `n` whose successive differences decay like `e^{lambda n}`
//! for a dissipativity constant `lambda < 0`.

use serde::Serialize;

use crate::backward::{solve_bsvi, Driver, SolverOptions, TerminalCondition};
use crate::convex::ConvexFunction;
use crate::error::{Error, Result};
use crate::forward::{simulate_reflected, SdeCoefficients, TimeGrid};
use crate::geometry::LevelSetDomain;
use crate::problem::start_value;
use crate::rng::derive_seed;

const MODULE: &str = "elliptic";

#[derive(Debug, Clone)]
pub struct EllipticConfig {
    pub domain: LevelSetDomain,
    pub coeffs: SdeCoefficients,
    pub driver: Driver,
    lambda: f64,
    pub tol: f64,
    pub n_max: usize,
    pub steps_per_unit_time: usize,
    /// Horizon of the first calibration run; the second uses `pilot + 2`.
    pub pilot: usize,
    pub options: SolverOptions,
}

impl EllipticConfig {
    /// Fails unless `max(mu_F + ell_F^2, mu_G) <= lambda < 0`. Without an
    /// explicit `lambda` the bound itself is used.
    pub fn new(
        domain: LevelSetDomain,
        coeffs: SdeCoefficients,
        driver: Driver,
        lambda: Option<f64>,
        tol: f64,
        steps_per_unit_time: usize,
    ) -> Result<Self> {
        let bound = driver.default_lambda();
        let lambda = lambda.unwrap_or(bound);
        if !(lambda < 0.0) {
            return Err(Error::invalid_config(
                MODULE,
                format!("lambda must be negative; max(mu_F + ell_F^2, mu_G) = {bound}, lambda = {lambda}"),
            ));
        }
        if lambda < bound {
            return Err(Error::invalid_config(
                MODULE,
                format!("lambda = {lambda} is below max(mu_F + ell_F^2, mu_G) = {bound}"),
            ));
        }
        if !(tol > 0.0) || steps_per_unit_time == 0 {
            return Err(Error::invalid_config(MODULE, "need tol > 0 and steps_per_unit_time >= 1"));
        }
        Ok(EllipticConfig {
            domain,
            coeffs,
            driver,
            lambda,
            tol,
            n_max: 40,
            steps_per_unit_time,
            pilot: 2,
            options: SolverOptions::default(),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Smallest `n >= 1` with `c_hat e^{lambda n} <= tol`, capped at `n_max`.
/// Returns `(n, capped)`.
pub fn horizon_from_constant(c_hat: f64, lambda: f64, tol: f64, n_max: usize) -> Result<(usize, bool)> {
    if !(lambda < 0.0) {
        return Err(Error::invalid_config(MODULE, format!("lambda must be negative, got {lambda}")));
    }
    if !(c_hat > 0.0) {
        return Ok((1, false));
    }
    let bound = |n: usize| c_hat * (lambda * n as f64).exp();
    let mut n = ((c_hat / tol).ln() / -lambda).ceil().max(1.0) as usize;
    while n > 1 && bound(n - 1) <= tol {
        n -= 1;
    }
    while bound(n) > tol && n < usize::MAX / 2 {
        n += 1;
    }
    if n > n_max {
        Ok((n_max, true))
    } else {
        Ok((n, false))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonChoice {
    pub n: usize,
    pub c_hat: f64,
    pub pilot_gap: f64,
    /// `n` hit `n_max`; the tolerance is not guaranteed.
    pub capped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayRow {
    pub n: usize,
    /// `Y_0^{x;n}`.
    pub y0: Vec<f64>,
    /// `|Y_0^{x;n+2} - Y_0^{x;n}|`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EllipticResult {
    pub u: Vec<f64>,
    pub std: Vec<f64>,
    pub n_used: usize,
    pub horizon: HorizonChoice,
    pub decay_table: Vec<DecayRow>,
    /// Least-squares slope of `ln(gap^2)` against `n`; compare with `2 lambda`.
    pub fitted_slope: Option<f64>,
}

/// `Y_0^{x;n}` for every `n` in `horizons`, all read off one simulation of
/// the longest horizon so the runs share their noise.
pub fn truncated_values(
    cfg: &EllipticConfig,
    x: &[f64],
    horizons: &[usize],
    paths: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let longest = *horizons.iter().max().ok_or_else(|| Error::invalid_input(MODULE, "no horizons"))?;
    if longest == 0 {
        return Err(Error::invalid_input(MODULE, "horizons must be >= 1"));
    }
    let spu = cfg.steps_per_unit_time;
    let grid = TimeGrid::uniform(longest as f64, longest * spu)?;
    let full = simulate_reflected(&cfg.domain, &cfg.coeffs, &grid, 0.0, x, paths, seed)?;
    let m = cfg.driver.m();
    let zero = ConvexFunction::zero(m);
    let kappa = TerminalCondition::constant(vec![0.0; m]);
    horizons
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::invalid_input(MODULE, "horizons must be >= 1"));
            }
            let bundle = full.prefix(n * spu)?;
            let sol = solve_bsvi(&bundle, &cfg.driver, &zero, &zero, &kappa, &cfg.options)?;
            let v = start_value(&bundle, &sol);
            Ok((v.u, v.std))
        })
        .collect()
}

fn gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Calibrates `c_hat` from the pilot pair `(pilot, pilot + 2)` and picks the horizon.
pub fn horizon_for_tolerance(cfg: &EllipticConfig, x: &[f64], paths: usize, seed: u64) -> Result<HorizonChoice> {
    let pilot = cfg.pilot.max(1);
    let vals = truncated_values(cfg, x, &[pilot, pilot + 2], paths, derive_seed(seed, 0x9170))?;
    let pilot_gap = gap(&vals[0].0, &vals[1].0);
    let c_hat = pilot_gap * (-cfg.lambda * pilot as f64).exp();
    let (n, capped) = horizon_from_constant(c_hat, cfg.lambda, cfg.tol, cfg.n_max)?;
    Ok(HorizonChoice { n, c_hat, pilot_gap, capped })
}

/// `u(x) = Y_0^{x;n}` at the calibrated horizon, with the decay table over
/// `n = 1..=table_max`.
pub fn solve_elliptic(cfg: &EllipticConfig, x: &[f64], paths: usize, seed: u64, table_max: usize) -> Result<EllipticResult> {
    if !cfg.domain.contains_closure(x) {
        return Err(Error::invalid_input(MODULE, format!("{x:?} outside the closure of the domain")));
    }
    let horizon = horizon_for_tolerance(cfg, x, paths, seed)?;
    let table_max = table_max.max(1);
    let mut horizons: Vec<usize> = (1..=table_max + 2).collect();
    if !horizons.contains(&horizon.n) {
        horizons.push(horizon.n);
    }
    let vals = truncated_values(cfg, x, &horizons, paths, seed)?;
    let decay_table: Vec<DecayRow> = (0..table_max)
        .map(|i| DecayRow { n: horizons[i], y0: vals[i].0.clone(), gap: gap(&vals[i + 2].0, &vals[i].0) })
        .collect();
    let pos = horizons.iter().position(|&h| h == horizon.n).expect("horizon is in the list");
    let fitted_slope = log_slope(decay_table.iter().map(|r| (r.n as f64, r.gap * r.gap)));
    Ok(EllipticResult {
        u: vals[pos].0.clone(),
        std: vals[pos].1.clone(),
        n_used: horizon.n,
        horizon,
        decay_table,
        fitted_slope,
    })
}

/// Least-squares slope of `ln(v)` against `n` over positive finite `v`.
pub fn log_slope(points: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.filter(|(_, v)| *v > 0.0 && v.is_finite()).map(|(n, v)| (n, v.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_examples() {
        assert_eq!(horizon_from_constant(0.0, -1.0, 1e-3, 40).unwrap(), (1, false));
        assert_eq!(horizon_from_constant(1.0, -1.0, 1e-3, 40).unwrap(), (7, false));
        assert_eq!(horizon_from_constant(2.0, -0.5, 1e-2, 40).unwrap(), (11, false));
        assert_eq!(horizon_from_constant(2.0, -0.5, 1e-2, 5).unwrap(), (5, true));
        assert!(horizon_from_constant(1.0, 0.0, 1e-3, 40).is_err());
    }

    #[test]
    fn slope_of_exact_exponential() {
        let s = log_slope((1..6).map(|n| (n as f64, 3.0 * (-2.0 * n as f64).exp()))).unwrap();
        assert!((s + 2.0).abs() < 1e-12);
    }
}
