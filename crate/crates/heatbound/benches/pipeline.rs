//! Benchmarks for the data-parallel hot paths: patch equilibration, the
//! estimator pipeline, and the time-stepping solve.
//!
//! With the default `parallel` feature the groups compare rayon pools of 1,
//! 2, and 4 workers; built with `--no-default-features` the same benches run
//! the sequential fallback, so the two code paths can be compared directly:
//!
//!   cargo bench -p heatbound
//!   cargo bench -p heatbound --no-default-features

use std::sync::Arc;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use heatbound::equilibration::build_global_flux;
use heatbound::estimators::compute_report;
use heatbound::fem::FeSpace;
use heatbound::mesh::build_unit_square_mesh;
use heatbound::problem::{find, ProblemSpec};
use heatbound::timestep::{run_implicit_euler, SolverOptions, SpaceTimeSolution, TimeGrid};

fn solve_2d(n: usize) -> (SpaceTimeSolution, ProblemSpec) {
    let problem = find("sin2d_decay").unwrap();
    let mesh = Arc::new(build_unit_square_mesh(n).unwrap());
    let space = Arc::new(FeSpace::p1(mesh));
    let grid = TimeGrid::uniform(1.0, n).unwrap();
    let opts = SolverOptions {
        tol: 1e-12,
        max_iters: None,
    };
    let sol = run_implicit_euler(space, grid, &problem, opts).unwrap();
    (sol, problem)
}

fn with_pool_sizes(
    group: &mut criterion::BenchmarkGroup<'_, criterion::measurement::WallTime>,
    mut work: impl FnMut() + Send,
) {
    #[cfg(feature = "parallel")]
    {
        for threads in [1usize, 2, 4] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            group.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, _| {
                b.iter(|| pool.install(&mut work));
            });
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        group.bench_function("sequential", |b| b.iter(&mut work));
    }
}

fn bench_flux_build(c: &mut Criterion) {
    let (sol, _) = solve_2d(8);
    let mut group = c.benchmark_group("global_flux_2d_n8");
    group
        .sample_size(10)
        .measurement_time(Duration::from_secs(8));
    with_pool_sizes(&mut group, || {
        std::hint::black_box(build_global_flux(&sol, 2).unwrap());
    });
    group.finish();
}

fn bench_estimator_report(c: &mut Criterion) {
    let (sol, problem) = solve_2d(8);
    let flux = build_global_flux(&sol, 2).unwrap();
    let mut group = c.benchmark_group("estimator_report_2d_n8");
    group
        .sample_size(10)
        .measurement_time(Duration::from_secs(8));
    with_pool_sizes(&mut group, || {
        std::hint::black_box(compute_report(&sol, &flux, &problem, 0).unwrap());
    });
    group.finish();
}

fn bench_implicit_euler(c: &mut Criterion) {
    let problem = find("sin2d_decay").unwrap();
    let mesh = Arc::new(build_unit_square_mesh(16).unwrap());
    let mut group = c.benchmark_group("implicit_euler_2d_n16");
    group
        .sample_size(10)
        .measurement_time(Duration::from_secs(8));
    with_pool_sizes(&mut group, || {
        let space = Arc::new(FeSpace::p1(Arc::clone(&mesh)));
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let opts = SolverOptions {
            tol: 1e-12,
            max_iters: None,
        };
        std::hint::black_box(run_implicit_euler(space, grid, &problem, opts).unwrap());
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_flux_build,
    bench_estimator_report,
    bench_implicit_euler
);
criterion_main!(benches);
