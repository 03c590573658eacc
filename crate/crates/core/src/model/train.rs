use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use thiserror::Error;

use super::{ModelError, ModelState, Mode};
use crate::autodiff::{AutodiffError, Tape};
use crate::data::{DatasetSplit, SplitKind};
use crate::optim::{sgd_step, OptimError, OptimizerState};
use crate::param::ParamSnapshot;
use crate::pruning::{Mask, PruneError};
use crate::seed;

const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(SplitKind),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("mask does not fit model: {0}")]
    Mask(#[from] PruneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Optimizer, schedule and stopping hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    /// 1-based epochs from which the learning rate is multiplied by `anneal_factor`.
    pub anneal_epochs: Vec<usize>,
    pub anneal_factor: f32,
    pub max_epochs: usize,
    /// Drives data order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 64,
            patience: 5,
            anneal_epochs: vec![50, 60, 75],
            anneal_factor: 0.1,
            max_epochs: 90,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.patience < 1 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(TrainError::Config("max_epochs must be at least 1".into()));
        }
        if self.anneal_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TrainError::Config(format!(
                "anneal epochs must be strictly increasing, got {:?}",
                self.anneal_epochs
            )));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor.is_finite()) {
            return Err(TrainError::Config("anneal factor must be positive".into()));
        }
        Ok(())
    }

    /// `lr0 * factor^(number of milestones <= epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let passed = self.anneal_epochs.iter().filter(|&&a| a <= epoch).count();
        self.learning_rate * self.anneal_factor.powi(passed as i32)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig { seed, ..self.clone() }
    }
}

/// Patience-based stopping on validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Feeds one epoch's validation loss; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_val_epoch: usize,
    /// Parameter values after each requested epoch (0 = before training).
    pub checkpoints: BTreeMap<usize, ParamSnapshot>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// Trains `model` in place. Weights outside `mask` are held at exactly zero.
/// The final-epoch weights are kept when early stopping triggers.
pub fn train(
    model: &mut ModelState,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    mask: Option<&Mask>,
    snapshot_epochs: &BTreeSet<usize>,
) -> Result<TrainTrace, TrainError> {
    cfg.validate()?;
    for kind in SplitKind::ALL {
        if data.part(kind).is_empty() {
            return Err(TrainError::EmptySplit(kind));
        }
    }
    if data.input_shape != model.spec.input_shape {
        return Err(ModelError::InputShape {
            expected: model.spec.input_shape.clone(),
            got: data.input_shape.clone(),
        }
        .into());
    }
    if let Some(m) = mask {
        m.check_congruent(model)?;
        m.apply(model)?;
    }
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay, &model.params)?;
    let mut checkpoints = BTreeMap::new();
    if snapshot_epochs.contains(&0) {
        checkpoints.insert(0, model.snapshot());
    }
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut epochs = Vec::new();
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stopped_epoch = 0;
    // Per-parameter keep-bits, aligned with model.params.
    let bits: Vec<Option<&[bool]>> = model
        .params
        .iter()
        .map(|p| mask.and_then(|m| m.entry(&p.name)))
        .collect();

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        opt.learning_rate = lr;
        order.sort_unstable();
        order.shuffle(&mut seed::stream(cfg.seed, &format!("epoch/{epoch}")));
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |detail: String| TrainError::Diverged {
                epoch,
                step: step + 1,
                detail,
            };
            let (x, labels) = data.batch(SplitKind::Train, chunk);
            let mut tape = Tape::new();
            let fwd = match model.forward(&mut tape, x, Mode::Train, mask) {
                Err(ModelError::Autodiff(AutodiffError::NonFinite { op })) => {
                    return Err(diverged(format!("non-finite output of {op}")))
                }
                other => other?,
            };
            let loss = match tape.softmax_cross_entropy(fwd.logits, &labels) {
                Err(AutodiffError::NonFinite { .. }) => return Err(diverged("non-finite loss".into())),
                other => other.map_err(ModelError::from)?,
            };
            let loss_value = tape.value(loss).data()[0] as f64;
            let mut grads = tape.backward(loss).map_err(ModelError::from)?;
            for (i, p) in model.params.iter_mut().enumerate() {
                match fwd.param_vars[i].and_then(|v| grads.take(v)) {
                    Some(g) => p.grad = g,
                    None => p.zero_grad(),
                }
                if let Some(keep) = bits[i] {
                    for (g, &k) in p.grad.data_mut().iter_mut().zip(keep) {
                        if !k {
                            *g = 0.0;
                        }
                    }
                }
            }
            sgd_step(&mut model.params, &mut opt)?;
            for (p, keep) in model.params.iter_mut().zip(&bits) {
                if let Some(keep) = keep {
                    for (w, &k) in p.value.data_mut().iter_mut().zip(keep.iter()) {
                        if !k {
                            *w = 0.0;
                        }
                    }
                }
            }
            model.apply_bn_updates(fwd.bn_updates);
            if model.params.iter().any(|p| !p.value.all_finite()) {
                return Err(diverged("non-finite parameter after update".into()));
            }
            loss_sum += loss_value * chunk.len() as f64;
        }
        let val = evaluate(model, mask, data, SplitKind::Validation)?;
        if !val.mean_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                step: 0,
                detail: "non-finite validation loss".into(),
            });
        }
        epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / n as f64,
            val_loss: val.mean_loss,
            val_accuracy: val.accuracy,
        });
        if snapshot_epochs.contains(&epoch) {
            checkpoints.insert(epoch, model.snapshot());
        }
        stopped_epoch = epoch;
        if stopper.observe(epoch, val.mean_loss) {
            break;
        }
    }
    Ok(TrainTrace {
        epochs,
        stopped_epoch,
        best_val_epoch: stopper.best_epoch(),
        checkpoints,
    })
}

/// Accuracy (argmax, first maximum wins) and mean loss on one split, with
/// masked weights zeroed for the pass. Does not modify the model.
pub fn evaluate(model: &ModelState, mask: Option<&Mask>, data: &DatasetSplit, kind: SplitKind) -> Result<Evaluation, TrainError> {
    let part = data.part(kind);
    if part.is_empty() {
        return Err(TrainError::EmptySplit(kind));
    }
    let indices: Vec<usize> = (0..part.len()).collect();
    let mut correct = 0;
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(kind, chunk);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, x, Mode::Eval, mask)?;
        let logits = tape.value(fwd.logits).clone();
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        let loss = tape
            .softmax_cross_entropy(fwd.logits, &labels)
            .map_err(ModelError::from)?;
        loss_sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / part.len() as f64,
        mean_loss: loss_sum / part.len() as f64,
        correct,
        total: part.len(),
    })
}
