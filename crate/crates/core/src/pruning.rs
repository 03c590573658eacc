//! Magnitude pruning and binary masks over prunable parameters.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::ModelState;

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error("pruning rate must be in (0, 1), got {0}")]
    RateOutOfRange(f64),
    #[error("pruning would remove every remaining weight of layer {layer}")]
    LayerEmptied { layer: String },
    #[error("mask incongruent with parameters: {0}")]
    Incongruent(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub keep: Vec<bool>,
}

impl MaskEntry {
    pub fn survivors(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Keep-bits for every prunable parameter, plus the number of pruning rounds
/// that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub entries: Vec<MaskEntry>,
    pub round: usize,
}

impl Mask {
    /// All-ones mask over the prunable parameters of `model`.
    pub fn ones(model: &ModelState) -> Self {
        Mask {
            entries: model
                .params
                .iter()
                .filter(|p| p.prunable)
                .map(|p| MaskEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    keep: vec![true; p.value.len()],
                })
                .collect(),
            round: 0,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&[bool]> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.keep.as_slice())
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.keep.len()).sum()
    }

    pub fn survivors(&self) -> usize {
        self.entries.iter().map(MaskEntry::survivors).sum()
    }

    /// Fraction of zero entries over all masked parameters.
    pub fn sparsity(&self) -> f64 {
        sparsity(self)
    }

    /// Sparsity restricted to entries for which `include` holds.
    pub fn sparsity_where(&self, include: impl Fn(&str) -> bool) -> f64 {
        let (mut zeros, mut total) = (0usize, 0usize);
        for e in self.entries.iter().filter(|e| include(&e.name)) {
            total += e.keep.len();
            zeros += e.keep.len() - e.survivors();
        }
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }

    /// Replaces (or adds) the entry `name` with an all-ones entry of `shape`.
    pub fn reset_entry(&mut self, name: &str, shape: &[usize]) {
        let fresh = MaskEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
        };
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => *e = fresh,
            None => self.entries.push(fresh),
        }
    }

    /// Every entry names a parameter of `model` with the same shape, and
    /// every prunable parameter has an entry.
    pub fn check_congruent(&self, model: &ModelState) -> Result<(), PruneError> {
        for e in &self.entries {
            let p = model
                .param(&e.name)
                .ok_or_else(|| PruneError::Incongruent(format!("model has no parameter {}", e.name)))?;
            if p.value.shape() != e.shape.as_slice() || e.keep.len() != p.value.len() {
                return Err(PruneError::Incongruent(format!(
                    "{}: mask {:?} vs parameter {:?}",
                    e.name,
                    e.shape,
                    p.value.shape()
                )));
            }
        }
        if let Some(p) = model.params.iter().find(|p| p.prunable && self.entry(&p.name).is_none()) {
            return Err(PruneError::Incongruent(format!("no mask entry for prunable {}", p.name)));
        }
        Ok(())
    }

    pub fn apply(&self, model: &mut ModelState) -> Result<(), PruneError> {
        apply_mask(model, self)
    }

    /// Whether every kept bit of `self` is also kept in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.entries.iter().all(|e| match other.entry(&e.name) {
            Some(o) => o.len() == e.keep.len() && e.keep.iter().zip(o).all(|(&a, &b)| !a || b),
            None => false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    /// One magnitude ranking pooled over all included layers.
    Global,
    /// Each included layer loses the same fraction of its survivors.
    PerLayer,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Global => "global",
            Scope::PerLayer => "per-layer",
        })
    }
}

impl FromStr for Scope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "global" => Ok(Scope::Global),
            "per-layer" | "layer" => Ok(Scope::PerLayer),
            other => Err(format!("unknown pruning scope {other:?} (global | per-layer)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    pub rate: f64,
    pub scope: Scope,
    /// Leave the classification head out of the ranking.
    pub exclude_head: bool,
    /// Further parameter names to leave untouched.
    pub exclude: BTreeSet<String>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            rate: 0.2,
            scope: Scope::Global,
            exclude_head: false,
            exclude: BTreeSet::new(),
        }
    }
}

/// `ceil(rate * survivors)`, guarded against the product landing a hair
/// above an integer through rounding.
pub fn pruned_count(survivors: usize, rate: f64) -> usize {
    let x = rate * survivors as f64;
    let c = (x - 1e-9 * x.max(1.0)).ceil();
    (c.max(0.0) as usize).min(survivors)
}

/// Survivors after `round` rounds of the integer schedule from `total`.
pub fn surviving_count(total: usize, round: usize, rate: f64) -> usize {
    (0..round).fold(total, |s, _| s - pruned_count(s, rate))
}

/// `(1 - rate)^round`: the fraction left after `round` rounds.
pub fn remaining_fraction(round: usize, rate: f64) -> f64 {
    (1.0 - rate).powi(round as i32)
}

/// Exact surviving ratio of the integer schedule for a model with `total`
/// prunable weights.
pub fn remaining_fraction_exact(total: usize, round: usize, rate: f64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    surviving_count(total, round, rate) as f64 / total as f64
}

pub fn sparsity(mask: &Mask) -> f64 {
    let total = mask.total();
    if total == 0 {
        return 0.0;
    }
    (total - mask.survivors()) as f64 / total as f64
}

/// `w <- w * m`: zeroes every weight whose mask bit is off.
pub fn apply_mask(model: &mut ModelState, mask: &Mask) -> Result<(), PruneError> {
    mask.check_congruent(model)?;
    for e in &mask.entries {
        let idx = model.index_of(&e.name).expect("checked by check_congruent");
        for (w, &k) in model.params[idx].value.data_mut().iter_mut().zip(&e.keep) {
            if !k {
                *w = 0.0;
            }
        }
    }
    Ok(())
}

/// Removes the `ceil(rate * survivors)` smallest-magnitude surviving weights
/// (pooled across layers for global scope, per layer otherwise). Equal
/// magnitudes are pruned in ascending (layer name, flat index) order.
pub fn magnitude_prune(state: &ModelState, mask: &Mask, cfg: &PruneConfig) -> Result<Mask, PruneError> {
    if !(cfg.rate > 0.0 && cfg.rate < 1.0) {
        return Err(PruneError::RateOutOfRange(cfg.rate));
    }
    mask.check_congruent(state)?;
    let included: Vec<usize> = mask
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            let p = state.param(&e.name).expect("congruent");
            p.prunable && !cfg.exclude.contains(&e.name) && !(cfg.exclude_head && state.is_head(&e.name))
        })
        .map(|(i, _)| i)
        .collect();

    // Layer rank by name gives the tie-break order without string compares.
    let mut by_name = included.clone();
    by_name.sort_by(|&a, &b| mask.entries[a].name.cmp(&mask.entries[b].name));
    let mut rank = vec![0usize; mask.entries.len()];
    for (r, &i) in by_name.iter().enumerate() {
        rank[i] = r;
    }

    let mut out = mask.clone();
    out.round += 1;

    let candidates = |entries: &[usize]| -> Vec<(f32, usize, usize, usize)> {
        let mut c = Vec::new();
        for &ei in entries {
            let e = &mask.entries[ei];
            let w = state.param(&e.name).expect("congruent").value.data();
            for (j, (&keep, &v)) in e.keep.iter().zip(w).enumerate() {
                if keep {
                    c.push((v.abs(), rank[ei], ei, j));
                }
            }
        }
        c
    };
    let order = |a: &(f32, usize, usize, usize), b: &(f32, usize, usize, usize)| -> Ordering {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.3.cmp(&b.3))
    };
    let cut = |out: &mut Mask, mut c: Vec<(f32, usize, usize, usize)>, n: usize| {
        if n == 0 {
            return;
        }
        if n < c.len() {
            c.select_nth_unstable_by(n - 1, order);
        }
        for &(_, _, ei, j) in &c[..n] {
            out.entries[ei].keep[j] = false;
        }
    };

    match cfg.scope {
        Scope::Global => {
            let c = candidates(&included);
            let n = pruned_count(c.len(), cfg.rate);
            cut(&mut out, c, n);
            for &ei in &included {
                if mask.entries[ei].survivors() > 0 && out.entries[ei].survivors() == 0 {
                    return Err(PruneError::LayerEmptied {
                        layer: mask.entries[ei].name.clone(),
                    });
                }
            }
        }
        Scope::PerLayer => {
            for &ei in &included {
                let c = candidates(&[ei]);
                let n = pruned_count(c.len(), cfg.rate);
                if !c.is_empty() && n >= c.len() {
                    return Err(PruneError::LayerEmptied {
                        layer: mask.entries[ei].name.clone(),
                    });
                }
                cut(&mut out, c, n);
            }
        }
    }
    Ok(out)
}
