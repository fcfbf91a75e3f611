//! Forward, backward and closed-form kernels on one worker and on the full
//! pool. Build with `--no-default-features` to time the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use volterra_fk::backward::{solve_type1, BackwardOptions};
use volterra_fk::coefficients::{builtin, linear_spec, Params};
use volterra_fk::exec;
use volterra_fk::forward::{simulate, ForwardOptions};
use volterra_fk::grid::{make_grid, sample_brownian};
use volterra_fk::linear_oracle::closed_form;

const PATHS: usize = 20_000;

fn pools() -> Vec<(&'static str, usize)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut p = vec![("sequential", 1)];
    if all > 1 {
        p.push(("parallel", all));
    }
    p
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    let coeffs = builtin("state-lipschitz", &Params::new()).unwrap();
    for n in [32, 64] {
        let g = make_grid(1.0, n).unwrap();
        let bw = sample_brownian(&g, PATHS, 1, 1).unwrap();
        let x0 = vec![0.0; n + 1];
        for (label, threads) in pools() {
            group.bench_with_input(BenchmarkId::new(label, n), &n, |b, _| {
                b.iter(|| exec::with_threads(threads, || simulate(&coeffs, &g, &bw, &x0, ForwardOptions::default()).unwrap()))
            });
        }
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("backward");
    group.sample_size(10);
    let coeffs = builtin("state-lipschitz", &Params::new()).unwrap();
    let n = 32;
    let g = make_grid(1.0, n).unwrap();
    let bw = sample_brownian(&g, PATHS, 1, 2).unwrap();
    let fwd = simulate(&coeffs, &g, &bw, &vec![0.0; n + 1], ForwardOptions::default()).unwrap();
    for (label, threads) in pools() {
        group.bench_function(BenchmarkId::new(label, n), |b| {
            b.iter(|| exec::with_threads(threads, || solve_type1(&coeffs, &fwd, &bw, &BackwardOptions::default()).unwrap()))
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("closed_form");
    group.sample_size(10);
    let spec = linear_spec("full").unwrap();
    let n = 64;
    let g = make_grid(1.0, n).unwrap();
    let bw = sample_brownian(&g, PATHS, 1, 3).unwrap();
    for (label, threads) in pools() {
        group.bench_function(BenchmarkId::new(label, n), |b| {
            b.iter(|| exec::with_threads(threads, || closed_form(&spec, &g, &bw).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, forward, backward, oracle);
criterion_main!(benches);
