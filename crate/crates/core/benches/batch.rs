use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chainmask::classifier::{train, TrainConfig};
use chainmask::par::map_slice;
use chainmask::relax::{perturb_and_map_sample, tune_lambda, SampleOptions};
use chainmask::{
    chain_marginals, dp_map, synth, Budget, ChainModel, Execution, RelaxConfig, SynthConfig,
};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn models(n: usize, len: usize) -> Vec<ChainModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| {
            let u = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
            let e = (0..len - 1).map(|_| rng.random_range(0.0..2.0)).collect();
            ChainModel::new(u, e, Budget::Fraction(0.6)).unwrap()
        })
        .collect()
}

fn batch_solvers(c: &mut Criterion) {
    let batch = models(2000, 40);
    let cfg = RelaxConfig::new(0.5, 1.0, 0).unwrap();
    let mut group = c.benchmark_group("batch");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new("dp_map", name), &exec, |b, &exec| {
            b.iter(|| map_slice(exec, black_box(&batch), |_, m| dp_map(m).score))
        });
        group.bench_with_input(BenchmarkId::new("tune_lambda", name), &exec, |b, &exec| {
            b.iter(|| map_slice(exec, black_box(&batch), |_, m| tune_lambda(m).lambda))
        });
        group.bench_with_input(BenchmarkId::new("marginals", name), &exec, |b, &exec| {
            b.iter(|| {
                map_slice(exec, black_box(&batch), |_, m| {
                    chain_marginals(m, &cfg).unwrap().log_z
                })
            })
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let model = &models(1, 60)[0];
    let cfg = RelaxConfig::new(0.5, 1.0, 3).unwrap();
    let mut group = c.benchmark_group("perturb_and_map");
    for (name, exec) in MODES {
        let opts = SampleOptions {
            execution: exec,
            ..Default::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| perturb_and_map_sample(black_box(model), &cfg, 5000, opts).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let data = synth::generate(&SynthConfig {
        n_instances: 400,
        ..Default::default()
    })
    .unwrap();
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig {
            epochs: 1,
            execution: exec,
            ..Default::default()
        };
        group.bench_function(name, |b| b.iter(|| train(black_box(&data), &cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, batch_solvers, sampling, training);
criterion_main!(benches);
