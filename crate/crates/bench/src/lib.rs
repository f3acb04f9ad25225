//! Fixtures shared by the benchmarks in `benches/`.

use vitprobe::data::{synth_generate, DatasetSpec};
use vitprobe::io::{init_toy, truncated_normal};
use vitprobe::probe::FeatureMatrix;
use vitprobe::{ModelConfig, ModelWeights, Tensor};

/// Deterministic `N(0, 1)` values truncated to ±2.
pub fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    truncated_normal(seed, "bench", shape, 1.0)
}

/// Toy config with its initial weights.
pub fn toy(seed: u64) -> (ModelConfig, ModelWeights<f32>) {
    let cfg = ModelConfig::toy();
    let w = init_toy(&cfg, seed);
    (cfg, w)
}

/// `n` synthetic images in `[0, 1]` with their labels.
pub fn images(n: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let data = synth_generate(&DatasetSpec::synth("bench", n, seed)).expect("valid spec");
    (data.images().clone(), data.labels().to_vec())
}

/// `n × d` features whose class means differ, ten classes.
pub fn features(n: usize, d: usize, seed: u64) -> FeatureMatrix {
    let mut x = random(&[n, d], seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    for (row, &y) in x.data_mut().chunks_exact_mut(d).zip(&labels) {
        row[y % d] += 1.5;
    }
    FeatureMatrix::new(x, labels, 10, None).expect("consistent shapes")
}
