use std::hint::black_box;

use carve_core::controllers::Controllers;
use carve_core::corpus::synthetic_corpus;
use carve_core::masked::{tomoe_logits, MaskPolicy};
use carve_core::model::DenseWeights;
use carve_core::runtime::{export, moe_forward, pseudo_moe_forward};
use carve_core::ModelConfig;
use criterion::{criterion_group, criterion_main, Criterion};

fn forward(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let dense = DenseWeights::init(&cfg, 0).unwrap();
    let ctl = Controllers::randomized(&cfg, 1).unwrap();
    let corpus = synthetic_corpus(2, 20_000).unwrap();
    let windows = corpus.windows(cfg.max_seq);
    let ex = export(&cfg, &dense, &ctl, &windows[..4]).unwrap();
    let toks = &windows[5];

    let mut g = c.benchmark_group("forward_256_tokens");
    g.sample_size(20);
    g.bench_function("dense", |b| b.iter(|| dense.logits(&cfg, black_box(toks)).unwrap()));
    g.bench_function("masked_finalized", |b| {
        let policy = MaskPolicy::Finalized {
            value_k: ex.manifest.layers.iter().map(|l| l.value_k).collect(),
        };
        b.iter(|| tomoe_logits(&cfg, &dense, &ctl, black_box(toks), &policy).unwrap())
    });
    g.bench_function("pseudo_moe", |b| b.iter(|| pseudo_moe_forward(&ex, black_box(toks)).unwrap()));
    g.bench_function("moe", |b| b.iter(|| moe_forward(&ex, black_box(toks)).unwrap()));
    g.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
