use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use trida_bench::{bundle, features, toy};
use trida_core::diagnostics::{silhouette_score, sliced_wasserstein};
use trida_core::{Graph, Mode};

fn model(c: &mut Criterion) {
    let data = toy(32);
    let b = bundle(32, &data);
    let idx: Vec<usize> = (0..32).collect();
    let x = data.source.images(&idx);
    let y = data.source.labels(&idx).unwrap();
    c.bench_function("features_eval_b32", |bch| bch.iter(|| b.forward_features(black_box(&x), Mode::Eval).unwrap()));
    c.bench_function("train_step_b32", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let out = b.features_graph(&mut g, xv, Mode::Train);
            let z = b.target_logits_graph(&mut g, out.features);
            let loss = g.cross_entropy(z, &y, 0.1);
            g.backward(loss);
            black_box(g.value(loss).item())
        })
    });
}

fn diagnostics(c: &mut Criterion) {
    let data = toy(32);
    let b = bundle(32, &data);
    let (fs, ft, labels) = features(&data, &b, 160);
    c.bench_function("sliced_wasserstein_160x256_128proj", |bch| {
        bch.iter(|| sliced_wasserstein(black_box(&fs), black_box(&ft), 128, 0).unwrap())
    });
    c.bench_function("silhouette_160x256", |bch| bch.iter(|| silhouette_score(black_box(&fs), &labels).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = model, diagnostics
}
criterion_main!(benches);
