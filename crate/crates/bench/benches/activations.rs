use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use era_core::autodiff::{Activation, Array, Mlp, Tape};
use era_core::distributions::{truncated_entropy, truncated_sample, CategoricalLogits};
use era_core::era::continuous::{era_activate, era_activate_batch};
use era_core::era::discrete::{era_logits, Inverse};
use era_core::era::llm::{era_objective, ResponseBatch};
use era_core::{EraContinuousConfig, EraDiscreteConfig, EraLlmConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn continuous(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("continuous");
    for d in [1usize, 6, 17] {
        let cfg = EraContinuousConfig::new(-(d as f64) / 2.0, (-5.0f64).exp(), 2.0f64.exp(), d).unwrap();
        let mu = normals(&mut rng, d, 0.9);
        let sh = normals(&mut rng, d, 2.0);
        g.bench_with_input(BenchmarkId::new("era_activate", d), &d, |b, _| {
            b.iter(|| era_activate(black_box(&mu), black_box(&sh), &cfg, 0.0).unwrap())
        });
        let p = era_activate(&mu, &sh, &cfg, 0.0).unwrap();
        g.bench_with_input(BenchmarkId::new("truncated_entropy", d), &d, |b, _| {
            b.iter(|| truncated_entropy(black_box(&p)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("truncated_sample", d), &d, |b, _| {
            b.iter(|| truncated_sample(black_box(&p), &mut rng).unwrap())
        });
    }
    let cfg = EraContinuousConfig::new(-1.0, (-5.0f64).exp(), 2.0f64.exp(), 2).unwrap();
    let mu = Array::matrix(128, 2, normals(&mut rng, 256, 0.9)).unwrap();
    let sh = Array::matrix(128, 2, normals(&mut rng, 256, 2.0)).unwrap();
    g.bench_function("era_activate_batch/128x2", |b| {
        b.iter(|| era_activate_batch(black_box(&mu), black_box(&sh), &cfg, 0.0).unwrap())
    });
    g.finish();
}

fn discrete(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("discrete");
    for d in [10usize, 1000] {
        let cfg = EraDiscreteConfig::new(0.5 * (d as f64).ln(), d).unwrap();
        let z = CategoricalLogits::new(normals(&mut rng, d, 5.0)).unwrap();
        for (name, inv) in [("approx", Inverse::Approx), ("exact", Inverse::Exact)] {
            g.bench_with_input(BenchmarkId::new(name, d), &d, |b, _| {
                b.iter(|| era_logits(black_box(&z), &cfg, inv).unwrap())
            });
        }
    }
    g.finish();
}

fn llm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, t, v) = (128, 12, 16);
    let logits = normals(&mut rng, b * t * v, 4.0);
    let tokens: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..v)).collect();
    let adv: Vec<f64> = (0..b).flat_map(|_| vec![rng.gen_range(-1.5..1.5); t]).collect();
    let batch = ResponseBatch::new((b, t, v), logits, tokens, adv, vec![true; b * t]).unwrap();
    let cfg = EraLlmConfig::new(0.45, Some(3.0), 2.0).unwrap();
    c.bench_function("llm/era_objective/128x12x16", |bch| {
        bch.iter(|| era_objective(black_box(&batch), &cfg).unwrap())
    });
}

fn autodiff(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mlp = Mlp::new(&[6, 64, 64, 1], Activation::Relu, &mut rng).with_layer_norm(true);
    let x = Array::matrix(128, 6, normals(&mut rng, 128 * 6, 1.0)).unwrap();
    c.bench_function("autodiff/mlp_forward_backward/128x6", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bound = mlp.bind(&tape);
            let y = bound.forward(&tape.constant(x.clone())).unwrap().sum();
            let g = tape.backward(&y).unwrap();
            black_box(bound.grads(&g))
        })
    });
}

criterion_group!(benches, continuous, discrete, llm, autodiff);
criterion_main!(benches);
