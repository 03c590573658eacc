//! Fixtures shared by the benchmarks.

use ticketlab::data::{make_synthetic, SynthKind};
use ticketlab::{build_model, Architecture, DatasetSplit, InitSpec, ModelSpec, ModelState, Tensor};

pub fn synthetic(per_class: usize) -> DatasetSplit {
    make_synthetic(SynthKind::NaturalProxy, 10, per_class, 8, 1).expect("valid generator arguments")
}

pub fn model(arch: &str, data: &DatasetSplit) -> ModelState {
    let arch: Architecture = arch.parse().expect("valid architecture");
    let spec = ModelSpec::new(arch, data.input_shape.clone(), data.num_classes).expect("valid spec");
    build_model(&spec, &InitSpec::xavier(3)).expect("model builds")
}

/// Deterministic values in [-1, 1).
pub fn filled(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919) % 2000) as f32 / 1000.0 - 1.0)
}
