use cilab::linalg::fit_linear_ls;
use cilab::trainer::Objective;
use cilab::{HeadMode, LossSpec, RidgeParam};
use cilab_bench::{gaussian, reference_data, reference_linear, relu_mlp};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = gaussian(n, n, 1);
        let b = gaussian(n, n, 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| bch.iter(|| black_box(a.matmul(&b))));
    }
    g.finish();
}

fn least_squares(c: &mut Criterion) {
    let x = gaussian(100, 2000, 3);
    let z = gaussian(80, 2000, 4);
    c.bench_function("fit_linear_ls_100x2000", |b| {
        b.iter(|| black_box(fit_linear_ls(&x, &z, RidgeParam::default()).unwrap()))
    });
}

fn training_step(c: &mut Criterion) {
    let (pre, down) = reference_data(2000, 15);
    let spec = LossSpec::squared(0.1).unwrap();
    let ridge = RidgeParam::default();
    let linear = reference_linear();
    let fast = Objective::new(&pre, &down, &spec, HeadMode::ExactRefit, ridge)
        .unwrap()
        .with_linear_moments()
        .unwrap();
    c.bench_function("step_linear_moments", |b| b.iter(|| black_box(fast.loss_and_gradient(&linear).unwrap())));
    let generic = Objective::new(&pre, &down, &spec, HeadMode::ExactRefit, ridge).unwrap();
    c.bench_function("step_linear_samples", |b| b.iter(|| black_box(generic.generic(&linear).unwrap())));
    let mlp = relu_mlp(32);
    c.bench_function("step_relu_mlp_32", |b| b.iter(|| black_box(generic.loss_and_gradient(&mlp).unwrap())));
}

criterion_group!(benches, matmul, least_squares, training_step);
criterion_main!(benches);
