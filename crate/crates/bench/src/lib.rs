//! Shared inputs for the benchmarks.

use merit_core::metrics::LabelMask;
use merit_core::{RngStream, Tensor};

/// Deterministic normal tensor.
pub fn normal(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = RngStream::new(seed, 0);
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}

/// Square mask holding one disc of `class` centred at `(cy, cx)`.
pub fn disc_mask(n: usize, cy: f64, cx: f64, r: f64, class: u8) -> LabelMask {
    let labels = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            if (y - cy).powi(2) + (x - cx).powi(2) <= r * r {
                class
            } else {
                0
            }
        })
        .collect();
    LabelMask::new(n, n, labels).expect("square mask")
}
