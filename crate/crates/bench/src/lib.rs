//! Fixtures shared by the benchmarks.

use trida_core::data::{generate_toy_benchmark, ToyBenchmark, ToyBenchmarkSpec};
use trida_core::{Mode, ModelBundle, ModelConfig, Tensor};

pub fn toy(side: usize) -> ToyBenchmark {
    generate_toy_benchmark(&ToyBenchmarkSpec {
        image_side: side,
        ..ToyBenchmarkSpec::default()
    })
    .expect("valid toy spec")
}

pub fn bundle(side: usize, data: &ToyBenchmark) -> ModelBundle {
    let cfg = ModelConfig {
        image_side: side,
        ..ModelConfig::default()
    };
    ModelBundle::new(cfg, data.source.class_set().to_vec(), data.pretrain.class_set().to_vec(), 0).expect("valid model")
}

/// Eval-mode features of the first `n` images of each domain.
pub fn features(data: &ToyBenchmark, bundle: &ModelBundle, n: usize) -> (Tensor, Tensor, Vec<usize>) {
    let idx: Vec<usize> = (0..n.min(data.source.len()).min(data.target.len())).collect();
    let fs = bundle.forward_features(&data.source.images(&idx), Mode::Eval).expect("features");
    let ft = bundle.forward_features(&data.target.images(&idx), Mode::Eval).expect("features");
    let labels = data.source.labels(&idx).expect("labeled");
    (fs, ft, labels)
}
