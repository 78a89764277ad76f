use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use kym::linearization::{assemble_jacobian, cokernel_basis, kernel_basis, BorderedSystem};
use kym::solver::{newton_solve, NewtonOptions};
use kym::{evaluate, residual};
use kym_bench::square_fixture;

fn evaluation(c: &mut Criterion) {
    let mut g = c.benchmark_group("evaluate");
    for n in [16, 32, 64] {
        let (st, a, tc) = square_fixture(n);
        g.bench_with_input(BenchmarkId::new("residual", n), &n, |b, _| b.iter(|| residual(black_box(&st), a, &tc).unwrap()));
    }
    g.finish();
}

fn linearization(c: &mut Criterion) {
    let mut g = c.benchmark_group("linearization");
    g.sample_size(20);
    for n in [16, 32, 64] {
        let (st, a, tc) = square_fixture(n);
        g.bench_with_input(BenchmarkId::new("jacobian", n), &n, |b, _| b.iter(|| assemble_jacobian(&st, a, &tc).unwrap()));
        let jac = assemble_jacobian(&st, a, &tc).unwrap();
        let ev = evaluate(&st).unwrap();
        let ker = kernel_basis(&st.model);
        let cok = cokernel_basis(&st.model, &ev, a, &tc);
        g.bench_with_input(BenchmarkId::new("bordered_factor", n), &n, |b, _| {
            b.iter(|| BorderedSystem::new(&jac, &ker, &cok).unwrap())
        });
        let sys = BorderedSystem::new(&jac, &ker, &cok).unwrap();
        let rhs = residual(&st, a, &tc).unwrap().stacked();
        g.bench_with_input(BenchmarkId::new("bordered_solve", n), &n, |b, _| b.iter(|| sys.solve(black_box(&rhs))));
    }
    g.finish();
}

fn newton(c: &mut Criterion) {
    let mut g = c.benchmark_group("newton");
    g.sample_size(10);
    for n in [16, 32] {
        let (st, a, tc) = square_fixture(n);
        let opts = NewtonOptions::default();
        g.bench_with_input(BenchmarkId::new("solve", n), &n, |b, _| b.iter(|| newton_solve(&st, a, &tc, &opts).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, evaluation, linearization, newton);
criterion_main!(benches);
