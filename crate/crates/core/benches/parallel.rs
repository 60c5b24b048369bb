//! Sequential vs thread-pool timing for the per-commodity kernels (balanced
//! projection, linear minimization) and the per-agent price evaluation.
//! Results are identical between policies; only the wall clock differs.

use agora::balance::{self, CommodityBox};
use agora::model::{random_scenario, GenParams, GenPricing};
use agora::pricing;
use agora::{ExecPolicy, MarketState};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POLICIES: [(&str, ExecPolicy); 2] = [
    ("sequential", ExecPolicy::Sequential),
    ("parallel", ExecPolicy::Parallel),
];

fn random_boxes(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<CommodityBox> {
    (0..n)
        .map(|_| {
            let lower: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..1.0)).collect();
            let upper: Vec<f64> = lower.iter().map(|&l| l + rng.gen_range(0.1..3.0)).collect();
            CommodityBox::new(lower, upper).unwrap()
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize, span: f64) -> MarketState {
    Array2::from_shape_fn((m, n), |_| rng.gen_range(-span..span))
}

fn bench_project(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let (m, n) = (600, 48);
    let boxes = random_boxes(&mut rng, m, n);
    let z = random_matrix(&mut rng, m, n, 4.0);
    let mut group = c.benchmark_group("project_market");
    group.sample_size(20);
    for (name, policy) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &policy, |b, &policy| {
            b.iter(|| balance::project_market(&z, &boxes, policy).unwrap());
        });
    }
    group.finish();
}

fn bench_lmo(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    let (m, n) = (600, 48);
    let boxes = random_boxes(&mut rng, m, n);
    let p = random_matrix(&mut rng, m, n, 3.0);
    let mut group = c.benchmark_group("lmo_market");
    group.sample_size(20);
    for (name, policy) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &policy, |b, &policy| {
            b.iter(|| balance::lmo_market(&p, &boxes, policy).unwrap());
        });
    }
    group.finish();
}

fn bench_price_gradient(c: &mut Criterion) {
    let scenario = random_scenario(
        93,
        48,
        8,
        &GenParams {
            pricing: GenPricing::Regularized,
            radius: None,
        },
    )
    .unwrap();
    let polys = pricing::build_polytopes(&scenario).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(94);
    let x = Array2::from_shape_fn(scenario.dims(), |(i, j)| {
        let a = &scenario.agents[i];
        rng.gen_range(a.lower[j]..a.upper[j])
    });
    let mut group = c.benchmark_group("market_eta");
    group.sample_size(10);
    for (name, policy) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &policy, |b, &policy| {
            b.iter(|| pricing::market_eta(&x, &scenario, &polys, policy).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, bench_project, bench_lmo, bench_price_gradient);
criterion_main!(benches);
