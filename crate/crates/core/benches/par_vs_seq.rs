//! Parallel vs sequential execution of the data-parallel hot paths:
//! batch forward passes and one-sided risk evaluation over a calibration
//! split. Built with the default `parallel` feature; the sequential side
//! uses the always-sequential helpers so both paths exist in one binary.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qucal_core::datasim::{add_gaussian_noise, gen_phantom, ForwardModel, PairedSample};
use qucal_core::numerics::Tensor;
use qucal_core::qnet::{ArchConfig, QuantileEmbeddingConfig, QuantileModel, QuantileRegressor};
use qucal_core::{conformal, par};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn make_set(n: usize, hw: usize) -> Vec<PairedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|i| {
            let x = gen_phantom(i as u64, hw, hw);
            let (y, sigma) = add_gaussian_noise(&x, 0.3, &mut rng);
            PairedSample {
                x,
                y,
                meta: ForwardModel::Gaussian { sigma },
            }
        })
        .collect()
}

fn make_model() -> QuantileModel {
    QuantileModel::init(ArchConfig {
        channels: vec![8, 16],
        embed: QuantileEmbeddingConfig {
            dim: 16,
            mlp_hidden: 32,
        },
        seed: 1,
    })
    .unwrap()
}

fn batch_forward(c: &mut Criterion) {
    let model = make_model();
    let set = make_set(16, 32);
    let ys: Vec<Tensor> = set.iter().map(|s| s.y.clone()).collect();

    let mut group = c.benchmark_group("batch_forward_16x32x32");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("parallel", "default"), |b| {
        b.iter(|| {
            let out: Vec<_> = par::map_slice(&ys, |y| model.predict(y, 0.5).unwrap());
            out
        })
    });
    group.bench_function(BenchmarkId::new("sequential", "fallback"), |b| {
        b.iter(|| {
            let out: Vec<_> = par::map_slice_seq(&ys, |y| model.predict(y, 0.5).unwrap());
            out
        })
    });
    group.finish();
}

fn risk_evaluation(c: &mut Criterion) {
    let model = make_model();
    let set = make_set(16, 32);

    let mut group = c.benchmark_group("one_sided_risks_16x32x32");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("parallel", "default"), |b| {
        b.iter(|| conformal::one_sided_risks(&model, &set, 0.05, 0.95).unwrap())
    });
    group.bench_function(BenchmarkId::new("sequential", "fallback"), |b| {
        b.iter(|| {
            // Same computation through the sequential map.
            let fracs: Vec<(f64, f64)> = par::map_slice_seq(&set, |s| {
                let lo = model.predict(&s.y, 0.05).unwrap();
                let up = model.predict(&s.y, 0.95).unwrap();
                let below = s
                    .x
                    .data()
                    .iter()
                    .zip(lo.data())
                    .filter(|(&x, &b)| x < b)
                    .count();
                let above = s
                    .x
                    .data()
                    .iter()
                    .zip(up.data())
                    .filter(|(&x, &b)| x > b)
                    .count();
                (
                    below as f64 / s.x.len() as f64,
                    above as f64 / s.x.len() as f64,
                )
            });
            let n = fracs.len() as f64;
            let (rl, ru) = fracs
                .iter()
                .fold((0.0, 0.0), |(a, b), (l, u)| (a + l, b + u));
            (rl / n, ru / n)
        })
    });
    group.finish();
}

criterion_group!(benches, batch_forward, risk_evaluation);
criterion_main!(benches);
