//! Sort-and-cut reference for global magnitude pruning.

use ticketlab::{Architecture, Mask, ModelSpec, ModelState, Parameter, Tensor};

/// A model whose only parameters are the given prunable vectors.
pub fn toy_model(layers: &[(String, Vec<f32>)]) -> ModelState {
    ModelState {
        spec: ModelSpec::new(Architecture::Mlp { hidden: vec![] }, vec![1, 1, 1], 2).unwrap(),
        params: layers
            .iter()
            .map(|(n, w)| Parameter::new(n.clone(), Tensor::new(vec![w.len()], w.clone()).unwrap(), true, true))
            .collect(),
        head_name: "head".into(),
    }
}

/// `ceil(num / den * n)` in integers.
pub fn ceil_fraction(n: usize, num: usize, den: usize) -> usize {
    (n * num).div_ceil(den)
}

/// Prunes `ceil(num/den * survivors)` surviving weights of smallest
/// magnitude, ordering ties by (layer name, index), by fully sorting.
pub fn reference_prune(model: &ModelState, mask: &Mask, num: usize, den: usize) -> Mask {
    let mut alive: Vec<(f32, &str, usize, usize)> = Vec::new();
    for (ei, e) in mask.entries.iter().enumerate() {
        let w = model.param(&e.name).unwrap().value.data();
        for (j, &k) in e.keep.iter().enumerate() {
            if k {
                alive.push((w[j].abs(), &e.name, j, ei));
            }
        }
    }
    alive.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    let cut = ceil_fraction(alive.len(), num, den);
    let mut out = mask.clone();
    out.round += 1;
    for &(_, _, j, ei) in &alive[..cut] {
        out.entries[ei].keep[j] = false;
    }
    out
}
