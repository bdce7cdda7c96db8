use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use fkvi_bench::{obstacle_problem, unit_disc};
use fkvi_core::{simulate_reflected, ConvexFunction, SdeCoefficients, TimeGrid};

fn simulate(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate_reflected");
    let p = obstacle_problem(200);
    group.bench_function("interval_2000x200", |b| {
        b.iter(|| simulate_reflected(&p.domain, &p.coeffs, &p.grid, 0.0, black_box(&[0.0]), 2000, 1).unwrap())
    });
    let disc = unit_disc();
    let co = SdeCoefficients::brownian(2, 1.0);
    let grid = TimeGrid::uniform(1.0, 200).unwrap();
    group.bench_function("disc_2000x200", |b| {
        b.iter(|| simulate_reflected(&disc, &co, &grid, 0.0, black_box(&[0.3, 0.0]), 2000, 1).unwrap())
    });
    group.finish();
}

fn solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_bsvi");
    group.sample_size(10);
    for steps in [50, 200] {
        let p = obstacle_problem(steps);
        let bundle = p.simulate(0.0, &[0.0], 2000, 2).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(steps), &bundle, |b, bundle| {
            b.iter(|| p.solve_on(bundle).unwrap())
        });
    }
    group.finish();
}

fn prox(c: &mut Criterion) {
    let mut group = c.benchmark_group("prox");
    let cases = [
        ("abs", ConvexFunction::Abs, vec![0.7]),
        ("ball", ConvexFunction::IndicatorBall { center: vec![0.0, 0.0, 0.0], radius: 1.0 }, vec![1.2, -0.4, 2.0]),
        ("separable", ConvexFunction::Separable(vec![ConvexFunction::Abs, ConvexFunction::IndicatorAtLeast { a: 0.0 }]), vec![0.3, -0.2]),
    ];
    for (name, f, y) in cases {
        group.bench_function(name, |b| b.iter(|| f.prox(black_box(&y), 0.1).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, simulate, solve, prox);
criterion_main!(benches);
