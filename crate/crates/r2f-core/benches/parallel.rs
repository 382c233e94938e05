//! Sequential vs rayon comparison for the data-parallel hot paths: the
//! matmul kernel rows, supervision-pair collection across examples, and
//! per-item metric evaluation. Both paths produce bit-identical results;
//! the speedup scales with available cores (on a single core the parallel
//! path only pays scheduling overhead).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use r2f_core::corpus::build_synthetic_corpus;
use r2f_core::gradients::{collect_pairs, PairExample};
use r2f_core::model::{attach_lora, init_model, next_token_dist, ModelConfig, Projection, Role};
use r2f_core::tensor::{matmul_nt_par, matmul_nt_seq};
use r2f_core::{par, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_nt");
    for &(m, k, n) in &[(64usize, 512usize, 512usize), (256, 512, 1024)] {
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.013).sin()).collect();
        let bt: Vec<f32> = (0..n * k).map(|i| (i as f32 * 0.029).cos()).collect();
        let label = format!("{m}x{k}x{n}");
        group.bench_with_input(BenchmarkId::new("seq", &label), &(), |b, _| {
            b.iter(|| matmul_nt_seq(&a, &bt, m, k, n))
        });
        group.bench_with_input(BenchmarkId::new("par", &label), &(), |b, _| {
            b.iter(|| matmul_nt_par(&a, &bt, m, k, n))
        });
    }
    group.finish();
}

fn bench_pair_collection(c: &mut Criterion) {
    let config = ModelConfig {
        vocab_size: 96,
        d_model: 32,
        n_heads: 4,
        n_layers: 2,
        seq_len: 24,
        role: Role::Proxy,
    };
    let params = init_model(&config, 1).unwrap();
    let adapters = attach_lora(&params, 4, &Projection::default_targets(), 2).unwrap();
    let label = Tensor::from_fn(vec![96], |_| 1.0 / 96.0);
    let examples: Vec<PairExample> = (0..24)
        .map(|i| PairExample {
            example_id: i,
            prompt: vec![1 + (i as u32 % 30), 40, 7, 2, 33],
            label: label.clone(),
        })
        .collect();

    let mut group = c.benchmark_group("collect_pairs");
    group.sample_size(10);
    // the library path dispatches per the `parallel` feature
    group.bench_function("feature_dispatch", |b| {
        b.iter(|| collect_pairs(&params, &adapters, &examples, examples.len()).unwrap())
    });
    group.finish();
}

fn bench_item_map(c: &mut Criterion) {
    let config = ModelConfig {
        vocab_size: 96,
        d_model: 32,
        n_heads: 4,
        n_layers: 2,
        seq_len: 24,
        role: Role::Target,
    };
    let params = init_model(&config, 3).unwrap();
    let corpus = build_synthetic_corpus(40, 2, 0.1, 96, 5).unwrap();
    let prompts: Vec<Vec<u32>> = corpus.facts.iter().map(|f| f.prompt.clone()).collect();

    let mut group = c.benchmark_group("forward_per_item");
    group.sample_size(10);
    group.bench_function("seq", |b| {
        b.iter(|| {
            par::map_indexed_seq(prompts.len(), |i| {
                next_token_dist(&params, &[], &prompts[i]).unwrap()
            })
        })
    });
    group.bench_function("dispatch", |b| {
        b.iter(|| {
            par::map_indexed(prompts.len(), |i| {
                next_token_dist(&params, &[], &prompts[i]).unwrap()
            })
        })
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_pair_collection, bench_item_map);
criterion_main!(benches);
