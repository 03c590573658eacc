//! Labelled image datasets: in-memory splits, the raw-tensor container
//! format, synthetic generators and stratified subsampling.

mod format;
mod subsample;
pub mod synth;

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::container::FormatError;
use crate::tensor::Tensor;

pub use format::{load_dataset, save_dataset, decode_dataset, encode_dataset};
pub use subsample::{subsample, SubsampleSpec};
pub use synth::{make_synthetic, SynthKind};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("label out of range: {split} sample {index} has label {label}, dataset has {num_classes} classes")]
    LabelOutOfRange {
        split: SplitKind,
        index: usize,
        label: u32,
        num_classes: usize,
    },
    #[error("split overlap: {first} sample {first_index} also appears in {second} at {second_index}")]
    SplitOverlap {
        first: SplitKind,
        first_index: usize,
        second: SplitKind,
        second_index: usize,
    },
    #[error("{0} split is empty")]
    EmptySplit(SplitKind),
    #[error("subsampling would leave class {class} without training samples")]
    ClassEmptied { class: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Validation, SplitKind::Test];
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Test => "test",
        })
    }
}

/// Raw (un-normalized) samples of one split, flattened `C*H*W` per sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Part {
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Part {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize, sample_len: usize) -> &[f32] {
        &self.images[i * sample_len..(i + 1) * sample_len]
    }

    pub fn push(&mut self, image: &[f32], label: u32) {
        self.images.extend_from_slice(image);
        self.labels.push(label);
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize], sample_len: usize) -> Part {
        let mut out = Part::default();
        for &i in indices {
            out.push(self.sample(i, sample_len), self.labels[i]);
        }
        out
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
        counts
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics of `part`, accumulated in double precision.
    pub fn from_part(part: &Part, input_shape: &[usize]) -> Self {
        let channels = input_shape[0];
        let plane: usize = input_shape[1..].iter().product();
        let sample_len = channels * plane;
        let mut sum = vec![0f64; channels];
        let mut sq = vec![0f64; channels];
        for i in 0..part.len() {
            let img = part.sample(i, sample_len);
            for c in 0..channels {
                for &v in &img[c * plane..(c + 1) * plane] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (part.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0)).sqrt().max(1e-6) as f32)
            .collect();
        Normalization {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub num_classes: usize,
    /// `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub train: Part,
    pub validation: Part,
    pub test: Part,
    /// Derived from the training part only.
    pub normalization: Normalization,
}

impl DatasetSplit {
    /// Builds a dataset and derives normalization from `train`.
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        input_shape: Vec<usize>,
        train: Part,
        validation: Part,
        test: Part,
    ) -> Result<Self, DataError> {
        if input_shape.len() != 3 || input_shape.contains(&0) {
            return Err(DataError::Invalid(format!(
                "input shape must be [C, H, W] with positive extents, got {input_shape:?}"
            )));
        }
        let normalization = Normalization::from_part(&train, &input_shape);
        let ds = DatasetSplit {
            name: name.into(),
            num_classes,
            input_shape,
            train,
            validation,
            test,
            normalization,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn sample_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn part(&self, kind: SplitKind) -> &Part {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }

    /// Checks label ranges, sizes, non-emptiness and split disjointness.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::Invalid(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let sample_len = self.sample_len();
        let channels = self.input_shape[0];
        if self.normalization.mean.len() != channels || self.normalization.std.len() != channels {
            return Err(DataError::Invalid("normalization does not match channel count".into()));
        }
        for kind in SplitKind::ALL {
            let part = self.part(kind);
            if part.is_empty() {
                return Err(DataError::EmptySplit(kind));
            }
            if part.images.len() != part.labels.len() * sample_len {
                return Err(DataError::Invalid(format!(
                    "{kind} split holds {} values for {} samples of {sample_len}",
                    part.images.len(),
                    part.labels.len()
                )));
            }
            if let Some((index, &label)) = part
                .labels
                .iter()
                .enumerate()
                .find(|(_, &l)| l as usize >= self.num_classes)
            {
                return Err(DataError::LabelOutOfRange {
                    split: kind,
                    index,
                    label,
                    num_classes: self.num_classes,
                });
            }
        }
        self.check_disjoint()
    }

    fn check_disjoint(&self) -> Result<(), DataError> {
        let sample_len = self.sample_len();
        let mut seen: HashMap<u64, Vec<(SplitKind, usize)>> = HashMap::new();
        for kind in SplitKind::ALL {
            let part = self.part(kind);
            for i in 0..part.len() {
                let img = part.sample(i, sample_len);
                let h = hash_image(img);
                let bucket = seen.entry(h).or_default();
                for &(other, j) in bucket.iter() {
                    if other != kind && self.part(other).sample(j, sample_len) == img {
                        return Err(DataError::SplitOverlap {
                            first: other,
                            first_index: j,
                            second: kind,
                            second_index: i,
                        });
                    }
                }
                bucket.push((kind, i));
            }
        }
        Ok(())
    }

    /// Normalized `[B, C, H, W]` batch and its labels.
    pub fn batch(&self, kind: SplitKind, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let part = self.part(kind);
        let sample_len = self.sample_len();
        let channels = self.input_shape[0];
        let plane = sample_len / channels;
        let norm = &self.normalization;
        let mut data = Vec::with_capacity(indices.len() * sample_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = part.sample(i, sample_len);
            for c in 0..channels {
                let (m, s) = (norm.mean[c], norm.std[c]);
                data.extend(img[c * plane..(c + 1) * plane].iter().map(|&v| (v - m) / s));
            }
            labels.push(part.labels[i] as usize);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.input_shape);
        let t = Tensor::new(shape, data).expect("batch shape is consistent by construction");
        (t, labels)
    }
}

fn hash_image(img: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &v in img {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
