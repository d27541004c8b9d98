use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfcg::operator::LinearOperator;
use mfcg::tensor::{apply_1d, even_odd_apply, gauss_quadrature, lagrange_basis, CellTensor, ShapeKind, SumFactorization};
use mfcg::{build_problem, BpId, ProblemConfig};

fn sum_factorization(c: &mut Criterion) {
    let mut g = c.benchmark_group("sum_factorization");
    for p in [2, 4, 6, 8] {
        let quad = gauss_quadrature(p + 2).unwrap();
        let basis = lagrange_basis(p, &quad).unwrap();
        let mut sf = SumFactorization::new(&basis);
        let n3 = (p + 1).pow(3);
        let nq3 = (p + 2).pow(3);
        let u: Vec<f64> = (0..n3).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut grads = vec![0.0; 3 * nq3];
        let mut back = vec![0.0; n3];
        g.bench_with_input(BenchmarkId::new("gradients", p), &p, |b, _| b.iter(|| sf.gradients(&basis, black_box(&u), &mut grads)));
        g.bench_with_input(BenchmarkId::new("integrate_gradients", p), &p, |b, _| {
            b.iter(|| sf.integrate_gradients(&basis, black_box(&grads), &mut back))
        });
    }
    g.finish();
}

fn even_odd(c: &mut Criterion) {
    let mut g = c.benchmark_group("one_direction");
    for p in [3, 7] {
        let quad = gauss_quadrature(p + 1).unwrap();
        let basis = lagrange_basis(p, &quad).unwrap();
        let n = p + 1;
        let data = (0..n * n * n).map(|i| (i as f64).cos()).collect();
        let x = CellTensor::from_data([n; 3], 1, data).unwrap();
        g.bench_with_input(BenchmarkId::new("even_odd", p), &p, |b, _| {
            b.iter(|| even_odd_apply(&basis, black_box(&x), 1, ShapeKind::Value, false).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("plain", p), &p, |b, _| {
            b.iter(|| apply_1d(&basis.shape_values, black_box(&x), 1, false).unwrap())
        });
    }
    g.finish();
}

fn operator(c: &mut Criterion) {
    let mut g = c.benchmark_group("operator_apply");
    g.sample_size(20);
    for bp in [BpId::Bp3, BpId::Bp5] {
        let prob = build_problem(&ProblemConfig { bp, degree: 4, cells: [8, 8, 8], ..Default::default() }).unwrap();
        let x = prob.rhs.clone();
        let mut y = vec![0.0; x.len()];
        g.bench_function(BenchmarkId::new(bp.name(), prob.n_dofs()), |b| b.iter(|| prob.operator.apply(black_box(&x), &mut y).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, sum_factorization, even_odd, operator);
criterion_main!(benches);
