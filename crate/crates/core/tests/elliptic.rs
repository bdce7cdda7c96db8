use fkvi_core::{
    horizon_for_tolerance, horizon_from_constant, solve_elliptic, Driver, DriverConstants, EllipticConfig,
    LevelSetDomain, SdeCoefficients,
};

fn relaxing(mu: f64) -> Driver {
    let k = DriverConstants { mu_f: mu, ell_f: 0.0, b_f: 1.0, mu_g: mu, b_g: 1.0 };
    Driver::new(1, 1, |_, _, y, _, out| out[0] = 1.0 - y[0], |_, _, y, out| out[0] = 1.0 - y[0], k)
}

fn config(lambda: Option<f64>) -> fkvi_core::Result<EllipticConfig> {
    EllipticConfig::new(
        LevelSetDomain::interval(-1.0, 1.0).unwrap(),
        SdeCoefficients::brownian(1, 0.5),
        relaxing(-1.0),
        lambda,
        1e-3,
        20,
    )
}

#[test]
fn lambda_must_respect_the_structural_bound() {
    assert_eq!(config(None).unwrap().lambda(), -1.0);
    assert_eq!(config(Some(-0.5)).unwrap().lambda(), -0.5);
    assert!(config(Some(-2.0)).is_err());
    assert!(config(Some(0.0)).is_err());
    let flat = EllipticConfig::new(
        LevelSetDomain::interval(-1.0, 1.0).unwrap(),
        SdeCoefficients::brownian(1, 0.5),
        relaxing(0.0),
        None,
        1e-3,
        20,
    );
    assert!(flat.is_err());
}

#[test]
fn horizon_grows_with_precision_and_caps() {
    let (n3, _) = horizon_from_constant(1.0, -1.0, 1e-3, 40).unwrap();
    let (n6, _) = horizon_from_constant(1.0, -1.0, 1e-6, 40).unwrap();
    assert!(n6 > n3);
    assert_eq!(horizon_from_constant(1e30, -1.0, 1e-3, 10).unwrap(), (10, true));
    assert!(horizon_from_constant(1.0, 0.5, 1e-3, 10).is_err());
}

#[test]
fn fixed_point_is_found() {
    // u = 1 solves both the interior and the boundary equation
    let cfg = config(None).unwrap();
    let choice = horizon_for_tolerance(&cfg, &[0.3], 200, 1).unwrap();
    assert!(!choice.capped);
    let res = solve_elliptic(&cfg, &[0.3], 200, 1, 4).unwrap();
    assert!((res.u[0] - 1.0).abs() < 2e-3, "{}", res.u[0]);
    assert_eq!(res.decay_table.len(), 4);
    assert!(res.decay_table.windows(2).all(|w| w[1].gap <= w[0].gap + 1e-12));
    assert!(solve_elliptic(&cfg, &[3.0], 200, 1, 4).is_err());
}
