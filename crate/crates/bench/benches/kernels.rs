use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use funcreserve::completion::PlsSystem;
use funcreserve::depth::{depth_values, DepthMethod, MbdScale};
use funcreserve::fpca::fit_fpca;
use funcreserve::regression::{fit_lasso, PenaltySpec};
use funcreserve::triangle::NUM_LAGS;

fn curves(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..NUM_LAGS).map(|x| rng.random::<f64>() / (1 + x) as f64).collect())
        .collect()
}

fn depth(c: &mut Criterion) {
    let mut g = c.benchmark_group("depth");
    for n in [100, 1000, 3000] {
        let data = curves(n, 1);
        for method in [DepthMethod::Mbd, DepthMethod::Exd] {
            g.bench_with_input(BenchmarkId::new(method.to_string(), n), &data, |b, d| {
                b.iter(|| depth_values(black_box(d), method, MbdScale::Pairwise).unwrap())
            });
        }
    }
    g.finish();
}

fn fpca(c: &mut Criterion) {
    let data = curves(2000, 2);
    c.bench_function("fpca/2000x10", |b| b.iter(|| fit_fpca(black_box(&data), NUM_LAGS).unwrap()));
}

fn pls(c: &mut Criterion) {
    let model = fit_fpca(&curves(500, 3), 6).unwrap();
    let prior = vec![0.01; 6];
    let observed = &curves(1, 4)[0][..4];
    let system = PlsSystem::new(&model, 4, 0.1).unwrap();
    c.bench_function("pls/setup", |b| b.iter(|| PlsSystem::new(black_box(&model), 4, 0.1).unwrap()));
    c.bench_function("pls/solve", |b| b.iter(|| system.solve(black_box(observed), &prior).unwrap()));
}

fn lasso(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<Vec<f64>> = (0..2000).map(|_| (0..13).map(|_| rng.random::<f64>()).collect()).collect();
    let scores: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..4).map(|k| r[k] - r[k + 1] + 0.1 * rng.random::<f64>()).collect())
        .collect();
    let names: Vec<String> = (0..13).map(|j| format!("x{j}")).collect();
    c.bench_function("lasso/fixed", |b| {
        b.iter(|| fit_lasso(black_box(&scores), &x, &names, &PenaltySpec::Fixed(0.01), None::<&[String]>).unwrap())
    });
    let mut g = c.benchmark_group("lasso_cv");
    g.sample_size(10);
    g.bench_function("10-fold", |b| {
        b.iter(|| fit_lasso(black_box(&scores), &x, &names, &PenaltySpec::cross_validated(7), None::<&[String]>).unwrap())
    });
    g.finish();
}

criterion_group!(benches, depth, fpca, pls, lasso);
criterion_main!(benches);
