//! Shared fixtures for the benchmarks.

use reconkit::data::{make_synthetic_dataset, SyntheticKind};
use reconkit::model::{RamConfig, RamModel};
use reconkit::Tensor;

pub fn test_image(channels: usize, size: usize) -> Tensor {
    make_synthetic_dataset(SyntheticKind::SmoothBumps, 1, &[channels, size, size], 0)
        .expect("synthetic image")
        .get(0)
        .clone()
}

/// A small model whose output head is active.
pub fn bench_model(width: usize, scales: usize) -> RamModel {
    let mut model = RamModel::new(RamConfig {
        num_scales: scales,
        base_width: width,
        blocks_per_scale: 1,
        krylov_order: 2,
        seed: 1,
        ..RamConfig::default()
    })
    .expect("valid config");
    let out = Tensor::full(vec![1, width, 3, 3], 0.01);
    model.params_mut().set_value("head1.out", out).expect("head exists");
    model
}
