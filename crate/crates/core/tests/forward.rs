use fkvi_core::forward::{bundle_distance, exp_moment_estimate, read_binary, write_binary, write_csv};
use fkvi_core::rng::Nested;
use fkvi_core::{
    local_time_identity_residual, simulate_reflected, simulate_reflected_with, CounterNormals, LevelSetDomain,
    ReflectionScheme, SdeCoefficients, TimeGrid,
};

fn rbm() -> (LevelSetDomain, SdeCoefficients) {
    (LevelSetDomain::interval(-1.0, 1.0).unwrap(), SdeCoefficients::brownian(1, 1.0))
}

#[test]
fn paths_stay_in_closure_and_local_time_is_monotone() {
    let (dom, co) = rbm();
    let grid = TimeGrid::uniform(1.0, 100).unwrap();
    let b = simulate_reflected(&dom, &co, &grid, 0.0, &[0.9], 500, 3).unwrap();
    b.check_invariants(&dom).unwrap();
    assert!((0..b.paths).any(|p| b.a_at(p, 100) > 0.0));
    for p in 0..b.paths {
        assert_eq!(b.a_at(p, 0), 0.0);
    }
}

#[test]
fn disc_paths_stay_in_closure() {
    let dom = LevelSetDomain::ball(vec![0.0, 0.0], 1.0).unwrap();
    let co = SdeCoefficients::constant(vec![2.0, 0.0], vec![0.5, 0.0, 0.0, 0.5], 2);
    let grid = TimeGrid::uniform(1.0, 200).unwrap();
    let b = simulate_reflected(&dom, &co, &grid, 0.0, &[0.0, 0.0], 200, 9).unwrap();
    b.check_invariants(&dom).unwrap();
    assert!(local_time_identity_residual(&dom, &co, &b).rms.is_finite());

    // phi is quadratic on a ball, so a deterministic drift leaves an O(dt) term
    let still = SdeCoefficients::constant(vec![2.0, 0.0], vec![0.0; 4], 2);
    let err = |n| {
        let g = TimeGrid::uniform(1.0, n).unwrap();
        let b = simulate_reflected(&dom, &still, &g, 0.0, &[0.1, 0.0], 1, 9).unwrap();
        assert!((b.x_at(0, n)[0] - 1.0).abs() < 1e-12);
        local_time_identity_residual(&dom, &still, &b).max_abs
    };
    let (coarse, fine) = (err(100), err(200));
    assert!(fine < 0.6 * coarse, "{coarse} -> {fine}");
}

#[test]
fn same_seed_same_bundle() {
    let (dom, co) = rbm();
    let grid = TimeGrid::uniform(0.5, 50).unwrap();
    let a = simulate_reflected(&dom, &co, &grid, 0.1, &[0.2], 300, 17).unwrap();
    let b = simulate_reflected(&dom, &co, &grid, 0.1, &[0.2], 300, 17).unwrap();
    assert_eq!(a, b);
    let c = simulate_reflected(&dom, &co, &grid, 0.1, &[0.2], 300, 18).unwrap();
    assert_ne!(a.x, c.x);
}

#[test]
fn pool_size_does_not_change_the_bundle() {
    let (dom, co) = rbm();
    let grid = TimeGrid::uniform(1.0, 80).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_reflected(&dom, &co, &grid, 0.0, &[0.0], 400, 5).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn far_from_boundary_matches_free_euler() {
    // small noise on a wide interval: no contact, so A = 0 and X is the plain Euler sum
    let dom = LevelSetDomain::interval(-100.0, 100.0).unwrap();
    let co = SdeCoefficients::constant(vec![0.3], vec![0.1], 1);
    let grid = TimeGrid::uniform(1.0, 40).unwrap();
    let b = simulate_reflected(&dom, &co, &grid, 0.0, &[0.0], 50, 2).unwrap();
    for p in 0..b.paths {
        let mut x = 0.0;
        for s in 0..40 {
            x += 0.3 * grid.dt() + 0.1 * b.db_at(p, s)[0];
            assert!((b.x_at(p, s + 1)[0] - x).abs() < 1e-12);
        }
        assert_eq!(b.a_at(p, 40), 0.0);
    }
}

#[test]
fn zero_noise_pushes_exactly_the_overshoot() {
    let dom = LevelSetDomain::interval(0.0, 1.0).unwrap();
    let co = SdeCoefficients::constant(vec![1.0], vec![0.0], 1);
    let grid = TimeGrid::uniform(2.0, 20).unwrap();
    let b = simulate_reflected(&dom, &co, &grid, 0.0, &[0.0], 1, 0).unwrap();
    assert!((b.x_at(0, 20)[0] - 1.0).abs() < 1e-14);
    // reaches 1 at t = 1, then every step overshoots by dt
    assert!((b.a_at(0, 20) - 1.0).abs() < 1e-12);
}

#[test]
fn start_time_inside_grid_leaves_earlier_nodes_flat() {
    let (dom, co) = rbm();
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    let b = simulate_reflected(&dom, &co, &grid, 0.35, &[0.5], 20, 1).unwrap();
    assert_eq!(b.start_index, 3);
    assert!((b.snap - 0.05).abs() < 1e-12);
    for p in 0..b.paths {
        for i in 0..=3 {
            assert_eq!(b.x_at(p, i), &[0.5]);
        }
        assert!(b.db_at(p, 0).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let (dom, co) = rbm();
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    assert!(simulate_reflected(&dom, &co, &grid, 0.0, &[1.5], 10, 0).is_err());
    assert!(simulate_reflected(&dom, &co, &grid, 1.5, &[0.0], 10, 0).is_err());
    assert!(simulate_reflected(&dom, &co, &grid, 0.0, &[0.0], 0, 0).is_err());
    assert!(simulate_reflected(&dom, &co, &grid, 0.0, &[0.0, 0.0], 10, 0).is_err());
    assert!(TimeGrid::uniform(0.0, 10).is_err());
    assert!(TimeGrid::uniform(1.0, 0).is_err());
}

#[test]
fn nested_source_matches_fine_brownian_path() {
    let (dom, co) = rbm();
    let coarse = TimeGrid::uniform(1.0, 25).unwrap();
    let fine = TimeGrid::uniform(1.0, 50).unwrap();
    let base = CounterNormals::new(11);
    let a = simulate_reflected_with(&dom, &co, &coarse, 0.0, &[0.0], 50, &Nested { base, factor: 2 }, ReflectionScheme::Projection)
        .unwrap();
    let b = simulate_reflected_with(&dom, &co, &fine, 0.0, &[0.0], 50, &base, ReflectionScheme::Projection).unwrap();
    for p in 0..50 {
        for s in 0..25 {
            let sum = b.db_at(p, 2 * s)[0] + b.db_at(p, 2 * s + 1)[0];
            assert!((a.db_at(p, s)[0] - sum).abs() < 1e-12);
        }
    }
}

#[test]
fn refinement_shrinks_the_coupled_gap() {
    let (dom, co) = rbm();
    let base = CounterNormals::new(21);
    let gap = |n: usize| {
        let c = simulate_reflected_with(
            &dom, &co, &TimeGrid::uniform(1.0, n).unwrap(), 0.0, &[0.8], 400, &Nested { base, factor: 4 },
            ReflectionScheme::Projection,
        )
        .unwrap();
        let f = simulate_reflected_with(
            &dom, &co, &TimeGrid::uniform(1.0, 2 * n).unwrap(), 0.0, &[0.8], 400, &Nested { base, factor: 2 },
            ReflectionScheme::Projection,
        )
        .unwrap();
        let n_c = c.grid.steps();
        let mut worst = 0.0f64;
        for p in 0..400 {
            let d = c.x_at(p, n_c)[0] - f.x_at(p, 2 * n_c)[0];
            worst += d * d;
        }
        worst / 400.0
    };
    assert!(gap(100) < gap(25));
}

#[test]
fn coupled_distance_vanishes_for_equal_starts() {
    let (dom, co) = rbm();
    let grid = TimeGrid::uniform(1.0, 50).unwrap();
    let a = simulate_reflected(&dom, &co, &grid, 0.0, &[0.3], 100, 4).unwrap();
    let b = simulate_reflected(&dom, &co, &grid, 0.0, &[0.3], 100, 4).unwrap();
    let d = bundle_distance(&a, &b).unwrap();
    assert_eq!((d.e_x, d.e_a), (0.0, 0.0));
    let c = simulate_reflected(&dom, &co, &grid, 0.0, &[0.3], 100, 5).unwrap();
    assert!(bundle_distance(&a, &c).is_err());
}

#[test]
fn exponential_moments() {
    let (dom, co) = rbm();
    let grid = TimeGrid::uniform(1.0, 100).unwrap();
    let b = simulate_reflected(&dom, &co, &grid, 0.0, &[0.0], 2000, 8).unwrap();
    let zero = exp_moment_estimate(&b, 0.0).unwrap();
    assert_eq!(zero.mean, 1.0);
    let m1 = exp_moment_estimate(&b, 1.0).unwrap();
    let m2 = exp_moment_estimate(&b, 2.0).unwrap();
    assert!(m1.mean > 1.0 && m2.mean > m1.mean && m1.mean.is_finite());
    assert!(!m2.overflow);
    assert!(exp_moment_estimate(&b, f64::NAN).is_err());
}

#[test]
fn binary_roundtrip_and_csv_shape() {
    let dom = LevelSetDomain::ball(vec![0.0, 0.0], 1.0).unwrap();
    let co = SdeCoefficients::brownian(2, 1.0);
    let grid = TimeGrid::uniform(0.5, 12).unwrap();
    let b = simulate_reflected(&dom, &co, &grid, 0.1, &[0.2, -0.3], 7, 99).unwrap();
    let mut bytes = Vec::new();
    write_binary(&b, &mut bytes).unwrap();
    assert_eq!(&bytes[..5], b"FKRB1");
    let back = read_binary(bytes.as_slice()).unwrap();
    assert_eq!(back, b);
    assert!(read_binary(&bytes[..bytes.len() - 1]).is_err());

    let mut csv = Vec::new();
    write_csv(&b, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "path,step,time,x0,x1,A");
    assert_eq!(lines.count(), 7 * 13);
}

#[test]
fn motionless_paths_stay_put() {
    let dom = LevelSetDomain::interval(-1.0, 1.0).unwrap();
    let still = SdeCoefficients::constant(vec![0.0], vec![0.0], 1);
    let grid = TimeGrid::uniform(1.0, 30).unwrap();
    let b = simulate_reflected(&dom, &still, &grid, 0.0, &[0.4], 20, 1).unwrap();
    assert!(b.x.iter().all(|x| *x == 0.4));
    assert!(b.a.iter().all(|a| *a == 0.0));
    let r = local_time_identity_residual(&dom, &still, &b);
    assert_eq!((r.rms, r.max_abs), (0.0, 0.0));
    assert_eq!(exp_moment_estimate(&b, 3.0).unwrap().mean, 1.0);
}

#[test]
fn reflected_brownian_motion_is_symmetric() {
    let (dom, co) = rbm();
    let grid = TimeGrid::uniform(1.0, 100).unwrap();
    let b = simulate_reflected(&dom, &co, &grid, 0.0, &[0.0], 10_000, 12).unwrap();
    let xs: Vec<f64> = (0..b.paths).map(|p| b.x_at(p, 100)[0]).collect();
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let se = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt();
    assert!(mean.abs() < 3.0 * se, "{mean} vs se {se}");
}

/// `E[A_T]` of reflected Brownian motion on `[-1, 1]` from 0, via
/// `E[A_T] = (T - E[X_T^2]) / 2` and the cosine expansion of `x^2`.
fn exact_mean_local_time(t: f64) -> f64 {
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    let second_moment = 1.0 / 3.0
        + (1..50)
            .map(|n| {
                let n2 = (n * n) as f64;
                4.0 * if n % 2 == 0 { 1.0 } else { -1.0 } / (n2 * pi2) * (-n2 * pi2 * t / 2.0).exp()
            })
            .sum::<f64>();
    (t - second_moment) / 2.0
}

#[test]
fn mean_local_time_bias_is_of_root_dt_order() {
    // the projected scheme underestimates A by O(sqrt(dt)); quadrupling N
    // should roughly halve the bias
    let (dom, co) = rbm();
    let base = CounterNormals::new(77);
    let mean_a = |n: usize, factor: usize| {
        let grid = TimeGrid::uniform(1.0, n).unwrap();
        let b = simulate_reflected_with(&dom, &co, &grid, 0.0, &[0.0], 20_000, &Nested { base, factor }, ReflectionScheme::Projection)
            .unwrap();
        (0..b.paths).map(|p| b.a_at(p, n)).sum::<f64>() / b.paths as f64
    };
    let exact = exact_mean_local_time(1.0);
    assert!((exact - 0.33479).abs() < 1e-4);
    let (coarse, fine) = (exact - mean_a(200, 4), exact - mean_a(800, 1));
    assert!(coarse > 0.0 && fine > 0.0);
    let ratio = fine / coarse;
    assert!((0.3..0.75).contains(&ratio), "bias {coarse} -> {fine}");
}

#[test]
fn outward_drift_in_the_disc_converges() {
    let dom = LevelSetDomain::ball(vec![0.0, 0.0], 1.0).unwrap();
    let push = SdeCoefficients::constant(vec![2.0, 0.0], vec![0.0; 4], 2);
    let rms = |n| {
        let grid = TimeGrid::uniform(1.0, n).unwrap();
        let b = simulate_reflected(&dom, &push, &grid, 0.0, &[0.0, 0.0], 1, 0).unwrap();
        local_time_identity_residual(&dom, &push, &b).rms
    };
    let (r400, r3200) = (rms(400), rms(3200));
    assert!(r3200 < r400 && r400 < 10.0 * r3200, "{r400} {r3200}");
}

#[test]
fn flows_converge_along_coupled_sequences() {
    let (dom, co) = rbm();
    let grid = TimeGrid::uniform(1.0, 200).unwrap();
    let mut last = f64::INFINITY;
    for n in 1..=10 {
        let h = 0.5f64.powi(n);
        let d = fkvi_core::forward::coupled_flow_distance(&dom, &co, &grid, (0.0, &[0.5]), (0.0, &[0.5 + h]), 2000, 3).unwrap();
        assert!(d.e_x <= last + 1e-15);
        last = d.e_x;
        if h <= 1e-3 {
            assert!(d.e_x < 1e-3);
        }
    }
    let mut last = f64::INFINITY;
    for n in 1..=6 {
        let s = 0.5f64.powi(n);
        let d = fkvi_core::forward::coupled_flow_distance(&dom, &co, &grid, (0.0, &[0.9]), (s, &[0.9]), 2000, 3).unwrap();
        assert!(d.e_x + d.e_a <= 1.1 * last, "n = {n}");
        last = d.e_x + d.e_a;
    }
}

#[test]
fn exponential_moments_grow_at_most_quadratically() {
    let (dom, co) = rbm();
    let grid = TimeGrid::uniform(1.0, 200).unwrap();
    let b = simulate_reflected(&dom, &co, &grid, 0.0, &[0.0], 10_000, 14).unwrap();
    let pts: Vec<(f64, f64)> =
        [0.5f64, 1.0, 2.0].iter().map(|&l| (l.ln(), exp_moment_estimate(&b, l).unwrap().mean.ln().ln())).collect();
    // slope of log(log E e^{lambda A}) against log(lambda)
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!(slope <= 2.5, "{slope}");
}
