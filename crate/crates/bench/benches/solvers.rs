use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfcg::{build_problem, solve, BpId, ProblemConfig, SolverConfig, SolverVariant};

/// Ten iterations of each variant on BP5, p = 4, 8^3 cells.
fn ten_iterations(c: &mut Criterion) {
    let prob = build_problem(&ProblemConfig { bp: BpId::Bp5, degree: 4, cells: [8, 8, 8], ..Default::default() }).unwrap();
    let mut g = c.benchmark_group("ten_iterations");
    g.sample_size(10);
    for v in SolverVariant::all(4) {
        let cfg = SolverConfig::new(v, f64::MIN_POSITIVE, 10);
        g.bench_function(BenchmarkId::from_parameter(v), |b| {
            b.iter(|| solve(&prob.operator, black_box(&prob.rhs), Some(&prob.preconditioner), &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, ten_iterations);
criterion_main!(benches);
