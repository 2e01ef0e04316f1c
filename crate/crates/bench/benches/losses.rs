use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use liftkd_bench::output_pair;
use liftkd_core::kd_losses::{lift_loss_grad, outkd_loss_grad};
use liftkd_core::place::place_loss_grad;
use liftkd_core::regression::ols_fit;
use liftkd_core::{LiftOptions, PlaceOptions, WeightScheduler};

fn regression(c: &mut Criterion) {
    let mut g = c.benchmark_group("ols_fit");
    for n in [64, 1024, 16384] {
        let (t, s) = output_pair(1, &[n]);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| ols_fit(black_box(&t), black_box(&s))));
    }
    g.finish();
}

fn losses(c: &mut Criterion) {
    let (t, s) = output_pair(2, &[128, 64]);
    c.bench_function("outkd_grad/128x64", |b| b.iter(|| outkd_loss_grad(black_box(&t), black_box(&s))));
    c.bench_function("lift_grad/128x64", |b| {
        b.iter(|| lift_loss_grad(black_box(&t), black_box(&s), 0.5, LiftOptions::default()))
    });
    let sched = WeightScheduler::adaptive();
    let mut g = c.benchmark_group("place_grad/3x32x32");
    let (t, s) = output_pair(3, &[3, 32, 32]);
    for k in [4, 16, 64] {
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| place_loss_grad(black_box(&t), black_box(&s), k, &sched, 0, PlaceOptions::default()))
        });
    }
    g.finish();
}

criterion_group!(benches, regression, losses);
criterion_main!(benches);
