//! Weight initialization.

use rand::Rng;

use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitScheme {
    XavierUniform,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::XavierUniform => "xavier-uniform",
        }
    }
}

/// Source of initial parameter draws. The same `(scheme, seed, stream,
/// shape)` always yields bit-identical values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl InitSpec {
    pub fn xavier(seed: u64) -> Self {
        InitSpec {
            scheme: InitScheme::XavierUniform,
            seed,
        }
    }

    /// Draws a weight tensor. `stream` separates tensors sharing one seed,
    /// normally the parameter name.
    pub fn draw(&self, shape: &[usize], fan_in: usize, fan_out: usize, stream: &str) -> Tensor<f32> {
        match self.scheme {
            InitScheme::XavierUniform => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = seed::stream(self.seed, stream);
                Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as f32)
            }
        }
    }
}
