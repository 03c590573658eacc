use rand::seq::SliceRandom;

use super::{DataError, DatasetSplit, Normalization};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsampleSpec {
    /// Fraction of the training part to keep, in `(0, 1]`.
    pub fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SubsampleSpec {
    pub fn new(fraction: f64, seed: u64) -> Self {
        SubsampleSpec {
            fraction,
            seed,
            stratified: true,
        }
    }
}

/// Keeps `round(fraction * n_c)` training samples of every class `c`
/// (or of the whole part when not stratified); validation and test are
/// untouched.
///
/// Each class is permuted once per seed and a prefix is kept, so for a fixed
/// seed smaller fractions select subsets of larger ones. Kept samples retain
/// their original relative order. Normalization is recomputed from the
/// reduced training part.
pub fn subsample(split: &DatasetSplit, spec: &SubsampleSpec) -> Result<DatasetSplit, DataError> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(DataError::Invalid(format!("fraction must be in (0, 1], got {}", spec.fraction)));
    }
    let train = &split.train;
    let mut keep = vec![false; train.len()];
    let groups: Vec<Vec<usize>> = if spec.stratified {
        (0..split.num_classes)
            .map(|c| (0..train.len()).filter(|&i| train.labels[i] as usize == c).collect())
            .collect()
    } else {
        vec![(0..train.len()).collect()]
    };
    for (g, mut members) in groups.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut seed::stream(spec.seed, &format!("subsample/{g}")));
        let n = (spec.fraction * members.len() as f64).round() as usize;
        if n == 0 {
            return Err(DataError::ClassEmptied {
                class: if spec.stratified { g } else { 0 },
            });
        }
        for &i in &members[..n] {
            keep[i] = true;
        }
    }
    let indices: Vec<usize> = (0..train.len()).filter(|&i| keep[i]).collect();
    let new_train = train.select(&indices, split.sample_len());
    if spec.stratified {
        let before = train.class_counts(split.num_classes);
        let after = new_train.class_counts(split.num_classes);
        if let Some(class) = (0..split.num_classes).find(|&c| before[c] > 0 && after[c] == 0) {
            return Err(DataError::ClassEmptied { class });
        }
    }
    let mut out = split.clone();
    out.normalization = Normalization::from_part(&new_train, &out.input_shape);
    out.train = new_train;
    out.validate()?;
    Ok(out)
}
