use fkvi_core::closed_form::{compile, Env, Layout};
use fkvi_core::forward::{exp_moment_estimate, write_binary, write_csv};
use fkvi_core::validate::sample_u_grid;
use fkvi_core::{
    check_compatibility, continuity_scan, fd_reference_parabolic_1d, local_time_identity_residual, pde_residuals,
    simulate_reflected_with, solve_elliptic, vi_residual, CounterNormals, GridFunction, ReflectedPathBundle,
};
use serde_json::json;

use crate::config::{DomainSpec, ExperimentConfig, ResidualSpec};
use crate::output::{indexed, quoted, to_json, Artifact, Csv, Outcome};
use crate::{CliError, Command};

/// Exponents at which `E exp(lambda A_T)` is reported.
const MOMENT_LAMBDAS: [f64; 3] = [0.5, 1.0, 2.0];
/// Random test processes used for the variational-inequality check.
const VI_TESTS: usize = 100;

pub fn dispatch(command: &Command, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    match command {
        Command::ForwardSim => forward_sim(cfg),
        Command::Solve => solve(cfg),
        Command::Elliptic { .. } => elliptic(cfg),
        Command::Continuity => continuity(cfg),
        Command::ValidateFd => validate_fd(cfg),
        Command::Residuals => residuals(cfg),
        Command::CompatCheck => compat(cfg),
    }
}

fn fmt_vec(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

fn mean(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let vals: Vec<f64> = v.collect();
    let n = vals.len() as f64;
    let mu = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 { vals.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mu, (var / n).sqrt())
}

/// The first `count` paths of `b`.
fn first_paths(b: &ReflectedPathBundle, count: usize) -> ReflectedPathBundle {
    let count = count.min(b.paths);
    let nodes = b.nodes();
    let steps = b.grid.steps();
    let mut out = b.clone();
    out.paths = count;
    out.x.truncate(count * nodes * b.dim);
    out.a.truncate(count * nodes);
    out.db.truncate(count * steps * b.k);
    out.boundary.truncate(count * nodes);
    out
}

fn forward_sim(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let domain = cfg.domain()?;
    let coeffs = cfg.coefficients()?;
    let grid = cfg.grid()?;
    let point = cfg.point()?;
    let ens = cfg.ensemble;
    let bundle = simulate_reflected_with(
        &domain,
        &coeffs,
        &grid,
        point.t,
        &point.x,
        ens.paths,
        &CounterNormals::new(ens.seed),
        cfg.scheme(),
    )?;
    let n = grid.steps();
    let identity = local_time_identity_residual(&domain, &coeffs, &bundle);
    let mean_x: Vec<f64> = (0..bundle.dim).map(|i| mean((0..bundle.paths).map(|p| bundle.x_at(p, n)[i])).0).collect();
    let (mean_a, a_err) = mean((0..bundle.paths).map(|p| bundle.a_at(p, n)));
    let touched = (0..bundle.paths).filter(|&p| bundle.a_at(p, n) > 0.0).count();
    let moments = MOMENT_LAMBDAS
        .iter()
        .map(|&l| exp_moment_estimate(&bundle, l).map(|e| json!({"lambda": l, "estimate": e})))
        .collect::<Result<Vec<_>, _>>()?;

    let mut artifacts = Vec::new();
    let mut csv = Vec::new();
    write_csv(&first_paths(&bundle, cfg.output.csv_paths.unwrap_or(bundle.paths)), &mut csv)?;
    artifacts.push(Artifact { name: "bundle.csv".into(), bytes: csv });
    if cfg.output.binary {
        let mut bin = Vec::new();
        write_binary(&bundle, &mut bin)?;
        artifacts.push(Artifact { name: "bundle.bin".into(), bytes: bin });
    }
    Ok(Outcome {
        headline: format!("E[A_T] = {mean_a} +- {a_err}, identity rms = {}", identity.rms),
        results: json!({
            "paths": bundle.paths,
            "steps": n,
            "start_index": bundle.start_index,
            "snap": bundle.snap,
            "mean_x_T": mean_x,
            "mean_A_T": mean_a,
            "A_T_std_err": a_err,
            "paths_touching_boundary": touched,
            "identity_residual": identity,
            "exp_moments": moments,
        }),
        artifacts,
    })
}

fn solve(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let point = cfg.point()?;
    let ens = cfg.ensemble;
    let (_, sol, value) = problem.run(point.t, &point.x, ens.paths, ens.seed)?;
    let vi = vi_residual(&sol, &problem.phi, &problem.psi, VI_TESTS, ens.seed)?;
    let m = sol.m;
    let mut header = vec!["node".to_string(), "time".to_string()];
    for i in 0..m {
        header.push(format!("y{i}_mean"));
        header.push(format!("y{i}_std"));
    }
    let mut csv = Csv::new(&header);
    for node in 0..sol.nodes() {
        let (mu, sd) = sol.node_stats(node);
        let mut row = vec![node.to_string(), problem.grid.node(node).to_string()];
        for i in 0..m {
            row.push(mu[i].to_string());
            row.push(sd[i].to_string());
        }
        csv.row(&row);
    }
    Ok(Outcome {
        headline: format!("u({}, {:?}) = {:?} +- {:?}", point.t, point.x, value.u, value.std_err),
        results: json!({
            "u": value.u,
            "std": value.std,
            "std_err": value.std_err,
            "start_index": value.start_index,
            "snap": value.snap,
            "vi_worst_margin": vi,
            "max_regression_condition": sol.max_condition,
        }),
        artifacts: vec![csv.finish("solution.csv")],
    })
}

fn elliptic(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (ecfg, table_max) = cfg.elliptic_config()?;
    let x = &cfg.point()?.x;
    let ens = cfg.ensemble;
    let res = solve_elliptic(&ecfg, x, ens.paths, ens.seed, table_max)?;
    let m = res.u.len();
    let mut header = vec!["n".to_string()];
    header.extend(indexed("y", m));
    header.push("gap".into());
    let mut csv = Csv::new(&header);
    for row in &res.decay_table {
        let mut cells = vec![row.n.to_string()];
        cells.extend(fmt_vec(&row.y0));
        cells.push(row.gap.to_string());
        csv.row(&cells);
    }
    let mut results = to_json(&res);
    results["lambda"] = json!(ecfg.lambda());
    results["two_lambda"] = json!(2.0 * ecfg.lambda());
    Ok(Outcome {
        headline: format!("u({x:?}) = {:?} with horizon {}", res.u, res.n_used),
        results,
        artifacts: vec![csv.finish("decay.csv")],
    })
}

fn continuity(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let spec = cfg.continuity.as_ref().ok_or_else(|| CliError::Config("config: missing [continuity]".into()))?;
    let ens = cfg.ensemble;
    let report = continuity_scan(&problem, &spec.sequence(), ens.paths, ens.seed, spec.target)?;
    let d = report.x.len();
    let mut header = vec!["n".to_string(), "t_n".to_string()];
    header.extend(indexed("x", d));
    header.extend(["start_index", "e_n", "e_n_std_err", "du"].map(String::from));
    let mut csv = Csv::new(&header);
    for r in &report.rows {
        let mut cells = vec![r.n.to_string(), r.t_n.to_string()];
        cells.extend(fmt_vec(&r.x_n));
        cells.extend([r.start_index.to_string(), r.e_n.to_string(), r.e_n_std_err.to_string(), r.du.to_string()]);
        csv.row(&cells);
    }
    Ok(Outcome {
        headline: format!(
            "continuity {}: e_1 = {:?}, e_last = {:?}",
            if report.pass { "PASS" } else { "FAIL" },
            report.rows.first().map(|r| r.e_n),
            report.rows.last().map(|r| r.e_n)
        ),
        results: to_json(&report),
        artifacts: vec![csv.finish("continuity.csv")],
    })
}

fn grid_csv(grid: &GridFunction, name: &str) -> Artifact {
    let mut csv = Csv::new(&["t".to_string(), "x".to_string(), "u".to_string()]);
    for (i, t) in grid.ts.iter().enumerate() {
        for (j, x) in grid.xs.iter().enumerate() {
            csv.row(&[t.to_string(), x.to_string(), grid.at(i, j).to_string()]);
        }
    }
    csv.finish(name)
}

fn validate_fd(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let spec = cfg.fd.ok_or_else(|| CliError::Config("config: missing [fd]".into()))?;
    let fd = fd_reference_parabolic_1d(&problem, &spec.options())?;
    let mut results = json!({
        "options": fd.options,
        "picard_change": fd.picard_change,
        "robin_residual": fd.robin_residual,
        "robin_max": fd.robin_max,
        "projected": fd.projected,
    });
    let mut headline = format!("finite differences on {}x{}", spec.space_nodes, spec.time_steps);
    if let Some(point) = &cfg.point {
        let u_fd = fd.value_at(point.t, point.x[0]);
        results["point"] = json!({"t": point.t, "x": point.x, "u_fd": u_fd});
        headline = format!("u_fd({}, {:?}) = {u_fd}", point.t, point.x);
        if spec.compare_mc {
            let ens = cfg.ensemble;
            let mc = problem.evaluate_u(point.t, &point.x, ens.paths, ens.seed)?;
            results["point"]["u_mc"] = json!(mc.u[0]);
            results["point"]["u_mc_std_err"] = json!(mc.std_err[0]);
            results["point"]["difference"] = json!((mc.u[0] - u_fd).abs());
            headline = format!("{headline}, u_mc = {} (|diff| = {})", mc.u[0], (mc.u[0] - u_fd).abs());
        }
    }
    Ok(Outcome { headline, results, artifacts: vec![grid_csv(&fd.grid, "fd_grid.csv")] })
}

fn uniform(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, CliError> {
    if n < 2 {
        return Err(CliError::Config("config: grids need at least two nodes".into()));
    }
    Ok((0..n).map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect())
}

fn residuals(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let spec = cfg.residuals.as_ref().ok_or_else(|| CliError::Config("config: missing [residuals]".into()))?;
    let (a, b) = match cfg.domain {
        DomainSpec::Interval { a, b, .. } => (a, b),
        _ => return Err(CliError::Config("config: residuals need an interval domain".into())),
    };
    let horizon = cfg.grid.horizon;
    let grid = match spec {
        ResidualSpec::Fd => {
            let fd = cfg.fd.ok_or_else(|| CliError::Config("config: residual source fd needs [fd]".into()))?;
            fd_reference_parabolic_1d(&problem, &fd.options())?.grid
        }
        ResidualSpec::Mc { time_nodes, space_nodes, paths } => {
            let ts = uniform(0.0, horizon, *time_nodes)?;
            let xs = uniform(a, b, *space_nodes)?;
            sample_u_grid(&problem, ts, xs, *paths, cfg.ensemble.seed)?
        }
        ResidualSpec::Exact { u, time_nodes, space_nodes } => {
            let f = compile(u, Layout { t: true, x: 1, y: 0, z: 0 })?;
            let ts = uniform(0.0, horizon, *time_nodes)?;
            let xs = uniform(a, b, *space_nodes)?;
            GridFunction::from_fn(ts, xs, |t, x| f.eval(&Env { t, x: &[x], y: &[], z: &[] }))
        }
    };
    let report = pde_residuals(&grid, &problem)?;
    let mut csv = Csv::new(&["t", "x", "boundary", "raw", "membership"].map(String::from));
    for r in &report.rows {
        csv.row(&[
            r.t.to_string(),
            r.x.to_string(),
            r.boundary.to_string(),
            r.raw.to_string(),
            r.membership.map(|v| v.to_string()).unwrap_or_default(),
        ]);
    }
    let mut results = to_json(&report);
    if let Some(obj) = results.as_object_mut() {
        obj.remove("rows");
    }
    Ok(Outcome {
        headline: format!(
            "interior max {}, boundary max {}, membership max {:?}",
            report.interior.max_abs,
            report.boundary.max_abs,
            report.membership.map(|s| s.max_abs)
        ),
        results,
        artifacts: vec![csv.finish("residuals.csv"), grid_csv(&grid, "u_grid.csv")],
    })
}

fn compat(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let ccfg = cfg.compat_config()?;
    let report = check_compatibility(
        &cfg.driver()?,
        &cfg.phi()?,
        &cfg.psi()?,
        &cfg.kappa()?,
        &cfg.domain()?,
        &ccfg,
        cfg.ensemble.seed,
    )?;
    let mut csv = Csv::new(&["condition", "pass", "worst_margin", "samples", "witness"].map(String::from));
    for c in &report.conditions {
        csv.row(&[quoted(c.name), c.pass.to_string(), c.worst_margin.to_string(), c.samples.to_string(), quoted(&c.witness)]);
    }
    let failed: Vec<&str> = report.conditions.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    Ok(Outcome {
        headline: if report.pass { "compatibility PASS".into() } else { format!("compatibility FAIL: {}", failed.join("; ")) },
        results: json!({"compat": ccfg, "report": report}),
        artifacts: vec![csv.finish("compat.csv")],
    })
}
