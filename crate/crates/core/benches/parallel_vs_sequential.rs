//! Data-parallel kernels on the default rayon pool against a one-thread pool.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dsvi::diagnostics::{estimate_joint_variance, evaluate_elbo};
use dsvi::{data, Objective, RngStream, VariationalParams};

fn kernels(c: &mut Criterion) {
    let ds = data::synth_logistic(5000, 20, 0).unwrap();
    let obj = Objective::new(ds.to_logistic().unwrap());
    let w = VariationalParams::constant(20, 0.1, -1.0).unwrap();
    let eps = RngStream::new(1, 0).standard_normal(20).unwrap();
    let stream = RngStream::new(2, 0);

    let pools = [
        ("parallel", rayon::ThreadPoolBuilder::new().build().unwrap()),
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    ];
    let mut g = c.benchmark_group("kernels");
    g.sample_size(20);
    for (label, pool) in &pools {
        g.bench_with_input(BenchmarkId::new("full_epoch_gradient", label), pool, |b, p| {
            b.iter(|| p.install(|| obj.grad_f_full_epoch(black_box(&w), &eps).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("joint_variance_2000", label), pool, |b, p| {
            b.iter(|| p.install(|| estimate_joint_variance(&obj, black_box(&w), 2000, &stream).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("elbo_200", label), pool, |b, p| {
            b.iter(|| p.install(|| evaluate_elbo(&obj, black_box(&w), 200, &stream).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
