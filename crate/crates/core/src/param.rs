//! Named model parameters and snapshots of them.

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    /// Layer-qualified, unique within a model (e.g. `stage1.block0.conv1.weight`).
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
    /// Eligible for magnitude pruning.
    pub prunable: bool,
    /// Updated by the optimizer. Batch-norm running statistics are stored as
    /// non-trainable parameters so that snapshots carry them.
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor<f32>, prunable: bool, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            prunable,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Values of every parameter at one point in training, in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl ParamSnapshot {
    pub fn capture(params: &[Parameter]) -> Self {
        ParamSnapshot {
            entries: params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Order-sensitive fingerprint of names, shapes and bit patterns.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(self.entries.iter().map(|(n, t)| (n.as_str(), t)))
    }
}

/// FNV-1a over names, shapes and raw bits of a tensor sequence.
pub fn fingerprint<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor<f32>)>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (name, t) in items {
        eat(name.as_bytes());
        for &d in t.shape() {
            eat(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}
