//! Shared fixtures for the benchmarks.

use osr_core::{gen_synthetic, Dataset, SynthConfig, Tensor};

/// A deterministic `[n, size, size, 1]` batch with values in `[0, 1)`.
pub fn image_batch(n: usize, size: usize) -> Tensor<f64> {
    let data = (0..n * size * size).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
    Tensor::new(vec![n, size, size, 1], data).expect("valid batch shape")
}

/// The default synthetic training split.
pub fn synthetic_train() -> Dataset {
    gen_synthetic(&SynthConfig::default()).expect("default synthetic config").0
}
