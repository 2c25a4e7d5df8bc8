use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::DVector;
use std::hint::black_box;

use viglm::harness::run_cell;
use viglm::operators::{empirical_vi, vi_jacobian};
use viglm::solvers::{vi_solve, StepSchedule};
use viglm::synth::{generate, BetaStar, ExperimentConfig};
use viglm::{Dataset, Family, Link};

fn figure_cell_data(link: Link) -> Dataset {
    let cfg = ExperimentConfig {
        dim: 20,
        n: 400,
        link,
        family: Family::Poisson,
        beta_star: BetaStar::Dense,
        intercept: false,
        seed: 1,
    };
    generate(&cfg).unwrap()
}

fn bench_operator_eval(c: &mut Criterion) {
    let data = figure_cell_data(Link::Softplus);
    let beta = DVector::from_element(20, 0.1);
    c.bench_function("empirical_vi softplus d=20 N=400", |b| {
        b.iter(|| empirical_vi(&Link::Softplus, black_box(&data), black_box(&beta)).unwrap())
    });
    c.bench_function("vi_jacobian softplus d=20 N=400", |b| {
        b.iter(|| vi_jacobian(&Link::Softplus, black_box(&data), black_box(&beta)).unwrap())
    });
}

fn bench_solver(c: &mut Criterion) {
    let data = figure_cell_data(Link::Softplus);
    let schedule = StepSchedule::experiment_default(400, 20);
    let beta0 = DVector::zeros(20);
    c.bench_function("vi_solve 50 iterations d=20 N=400", |b| {
        b.iter(|| {
            vi_solve(
                &Link::Softplus,
                black_box(&data),
                black_box(&beta0),
                &schedule,
                50,
                0.0,
            )
            .unwrap()
        })
    });
}

fn bench_generation(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        dim: 20,
        n: 400,
        link: Link::Exp,
        family: Family::Poisson,
        beta_star: BetaStar::Dense,
        intercept: false,
        seed: 3,
    };
    c.bench_function("generate poisson/log d=20 N=400", |b| {
        b.iter_batched(
            || {
                let mut fresh = cfg.clone();
                fresh.seed = fresh.seed.wrapping_add(1);
                fresh
            },
            |cfg| generate(black_box(&cfg)).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_cell(c: &mut Criterion) {
    let schedule = StepSchedule::experiment_default(100, 10);
    let mut group = c.benchmark_group("run_cell");
    group.sample_size(10);
    group.bench_function("softplus d=10 N=100 k=20 reps=20", |b| {
        b.iter(|| {
            run_cell(
                &Link::Softplus,
                10,
                100,
                20,
                20,
                &schedule,
                &BetaStar::Dense,
                black_box(9),
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_operator_eval,
    bench_solver,
    bench_generation,
    bench_cell
);
criterion_main!(benches);
