use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use twoscale::bounds::{self, BoundConstants};
use twoscale::engine::{self, SimOptions};
use twoscale::odeflow::{integrate_phi_weight, PhiFlow};
use twoscale_bench::{default_schedule, laplace_pair, linear_problem, start};

fn bench_engine_run(c: &mut Criterion) {
    let p = linear_problem();
    let sched = default_schedule(2_000);
    let (nf, ns) = laplace_pair(&p, 0.1);
    let (x0, y0) = start(&p);
    let opts = SimOptions { track_deviations: false, ..SimOptions::default() };
    c.bench_function("engine_run_2k_steps", |b| {
        b.iter(|| engine::run(&p, &sched, &nf, &ns, &x0, &y0, 7, 0, &opts).unwrap())
    });
}

fn bench_decay_recurrence(c: &mut Criterion) {
    let sched = default_schedule(20_000);
    c.bench_function("decayed_step_maxima_20k", |b| {
        b.iter(|| bounds::compute_beta(black_box(&sched), 1.0, 0))
    });
}

fn bench_phi_weight(c: &mut Criterion) {
    let p = linear_problem();
    let flow = PhiFlow::fast_at_anchor(&p, &p.y_star, 1e-3).unwrap();
    c.bench_function("phi_weight_half_unit", |b| {
        b.iter(|| integrate_phi_weight(black_box(flow.generator()), 0.5, 1e-3).unwrap())
    });
}

fn bench_series_bounds(c: &mut Criterion) {
    let sched = default_schedule(20_000);
    let constants = BoundConstants {
        c1: 1.0,
        c2: 10.0,
        u_l: 0.0,
        kappa_fast: 1.0,
        kappa_slow: 1.0,
    };
    c.bench_function("series_bounds_20k", |b| {
        b.iter(|| bounds::theorem_bounds(black_box(&sched), 1_000, 0.5, &constants).unwrap())
    });
}

fn bench_martingale_series(c: &mut Criterion) {
    let p = linear_problem();
    let sched = default_schedule(2_000);
    let (nf, ns) = laplace_pair(&p, 0.1);
    let (x0, y0) = start(&p);
    let opts = SimOptions { track_deviations: false, ..SimOptions::default() };
    let rec = engine::run(&p, &sched, &nf, &ns, &x0, &y0, 7, 0, &opts).unwrap();
    let cache = engine::build_phi_op_cache(&p, &sched, 1e-3).unwrap();
    c.bench_function("martingale_series_2k", |b| {
        b.iter(|| engine::martingale_series(black_box(&rec), &cache, 200).unwrap())
    });
}

criterion_group!(
    benches,
    bench_engine_run,
    bench_decay_recurrence,
    bench_phi_weight,
    bench_series_bounds,
    bench_martingale_series
);
criterion_main!(benches);
