//! Iterative magnitude pruning with late resetting, control variants and
//! the portable ticket file.

mod file;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::container::FormatError;
use crate::data::{DatasetSplit, SplitKind};
use crate::init::InitSpec;
use crate::model::{build_model, evaluate, train, ModelError, ModelSpec, ModelState, TrainConfig, TrainError};
use crate::param::ParamSnapshot;
use crate::pruning::{apply_mask, magnitude_prune, Mask, PruneConfig, PruneError};

pub use file::{decode_ticket, encode_ticket, load_ticket, save_ladder, save_ticket, ticket_file_name, TICKET_EXTENSION};

/// Written into every ticket as `created_by`.
pub const CREATED_BY: &str = concat!("ticketlab ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum LotteryError {
    #[error("invalid ticket request: {0}")]
    Invalid(String),
    #[error("fresh seed {0} equals the ticket's init seed; the draw would not be a control")]
    SameSeed(u64),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Where a bundle's weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Surviving weights at the end of epoch `k` of the first, unpruned run.
    LateReset,
    /// Surviving weights at initialization.
    OriginalInit,
    /// Weights of the masked network at the end of its own training.
    FullyTrained,
    /// Same mask, weights drawn afresh from another seed.
    RandomReinit,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::LateReset => "late_reset_k",
            Variant::OriginalInit => "original_init",
            Variant::FullyTrained => "fully_trained",
            Variant::RandomReinit => "random_reinit",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "late_reset_k" => Ok(Variant::LateReset),
            "original_init" => Ok(Variant::OriginalInit),
            "fully_trained" => Ok(Variant::FullyTrained),
            "random_reinit" => Ok(Variant::RandomReinit),
            other => Err(format!("unknown ticket variant {other:?}")),
        }
    }
}

/// A mask together with the (pre-masked) weights it should be trained from.
#[derive(Debug, Clone, PartialEq)]
pub struct TicketBundle {
    pub mask: Mask,
    pub theta: ParamSnapshot,
    pub variant: Variant,
    /// Snapshot epoch of the late-reset weights.
    pub k: usize,
    pub round: usize,
    pub source_dataset: String,
    pub model_spec: ModelSpec,
    pub init_seed: u64,
    pub created_by: String,
    /// Free-form provenance (pruning scope, rate, head policy, ...).
    pub metadata: BTreeMap<String, String>,
}

impl TicketBundle {
    pub fn sparsity(&self) -> f64 {
        self.mask.sparsity()
    }

    /// Sparsity over every masked parameter outside the classification head.
    pub fn trunk_sparsity(&self) -> f64 {
        let head = format!("{}.", crate::model::HEAD_NAME);
        self.mask.sparsity_where(|name| !name.starts_with(&head))
    }

    /// Model carrying this bundle's weights.
    pub fn to_model(&self) -> Result<ModelState, LotteryError> {
        let mut model = build_model(&self.model_spec, &InitSpec::xavier(self.init_seed))?;
        model.load_snapshot(&self.theta)?;
        self.mask.check_congruent(&model)?;
        Ok(model)
    }

    /// Shapes agree with the model spec, theta is stored pre-masked and the
    /// round matches the mask.
    pub fn validate(&self) -> Result<(), LotteryError> {
        let model = self.to_model()?;
        if self.round != self.mask.round {
            return Err(LotteryError::Invalid(format!(
                "bundle round {} but mask round {}",
                self.round, self.mask.round
            )));
        }
        for e in &self.mask.entries {
            let w = model.param(&e.name).expect("congruent").value.data();
            if let Some(i) = e.keep.iter().zip(w).position(|(&k, &v)| !k && v != 0.0) {
                return Err(LotteryError::Invalid(format!("{}[{i}] is masked but nonzero", e.name)));
            }
        }
        Ok(())
    }

    /// Stable hash of mask and weights.
    pub fn fingerprint(&self) -> u64 {
        let mut h = self.theta.fingerprint();
        for e in &self.mask.entries {
            for chunk in e.keep.chunks(64) {
                let word = chunk.iter().enumerate().fold(0u64, |w, (i, &k)| w | ((k as u64) << i));
                h = crate::seed::derive_seed(h ^ word, &e.name);
            }
        }
        h
    }
}

/// Tickets of increasing sparsity from one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TicketLadder {
    pub bundles: Vec<TicketBundle>,
}

impl TicketLadder {
    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    pub fn get(&self, round: usize) -> Option<&TicketBundle> {
        self.bundles.iter().find(|b| b.round == round)
    }

    pub fn sparsities(&self) -> Vec<f64> {
        self.bundles.iter().map(TicketBundle::sparsity).collect()
    }

    /// Sparsity strictly increases and all rungs share provenance.
    pub fn check(&self) -> Result<(), LotteryError> {
        for pair in self.bundles.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.sparsity() <= a.sparsity() {
                return Err(LotteryError::Invalid(format!(
                    "sparsity does not increase from round {} to {}",
                    a.round, b.round
                )));
            }
            if (a.variant, a.k, a.init_seed) != (b.variant, b.k, b.init_seed) {
                return Err(LotteryError::Invalid("ladder rungs disagree on provenance".into()));
            }
        }
        Ok(())
    }
}

/// Test-set result of one training run inside `find_tickets`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundOutcome {
    /// 0 for the unpruned run.
    pub round: usize,
    pub sparsity: f64,
    pub test_accuracy: f64,
    pub best_val_epoch: usize,
    pub stopped_epoch: usize,
}

/// Everything `find_tickets` produced. When a round diverges, `ladder`
/// holds the rungs produced so far and `aborted` says why.
#[derive(Debug, Clone)]
pub struct LadderRun {
    pub ladder: TicketLadder,
    /// End-of-training weights of each round's masked network.
    pub fully_trained: Vec<TicketBundle>,
    pub baseline: RoundOutcome,
    /// Outcome of training each rung's ticket in isolation.
    pub rounds: Vec<RoundOutcome>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FindConfig {
    pub rounds: usize,
    /// Snapshot epoch for late resetting; 0 resets to initialization.
    pub k: usize,
    pub train: TrainConfig,
    pub prune: PruneConfig,
}

impl Default for FindConfig {
    fn default() -> Self {
        FindConfig {
            rounds: 31,
            k: 2,
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
        }
    }
}

/// `trained` with every parameter restored from `snapshot`, then masked.
pub fn late_reset(trained: &ModelState, snapshot: &ParamSnapshot, mask: &Mask) -> Result<ModelState, LotteryError> {
    let mut out = trained.clone();
    out.load_snapshot(snapshot)?;
    apply_mask(&mut out, mask)?;
    Ok(out)
}

fn outcome(round: usize, sparsity: f64, model: &ModelState, mask: Option<&Mask>, data: &DatasetSplit, trace: &crate::model::TrainTrace) -> Result<RoundOutcome, TrainError> {
    let eval = evaluate(model, mask, data, SplitKind::Test)?;
    Ok(RoundOutcome {
        round,
        sparsity,
        test_accuracy: eval.accuracy,
        best_val_epoch: trace.best_val_epoch,
        stopped_epoch: trace.stopped_epoch,
    })
}

/// Train, prune the smallest surviving weights, reset the survivors to the
/// epoch-`k` snapshot of the first run, retrain, and repeat.
pub fn find_tickets(spec: &ModelSpec, init: &InitSpec, data: &DatasetSplit, cfg: &FindConfig) -> Result<LadderRun, LotteryError> {
    if cfg.rounds == 0 {
        return Err(LotteryError::Invalid("rounds must be at least 1".into()));
    }
    cfg.train.validate()?;
    if spec.input_shape != data.input_shape {
        return Err(ModelError::InputShape {
            expected: spec.input_shape.clone(),
            got: data.input_shape.clone(),
        }
        .into());
    }
    if spec.num_classes != data.num_classes {
        return Err(LotteryError::Invalid(format!(
            "model has {} classes, {} has {}",
            spec.num_classes, data.name, data.num_classes
        )));
    }
    let mut model = build_model(spec, init)?;
    let trace = train(&mut model, data, &cfg.train, None, &BTreeSet::from([cfg.k]))?;
    let theta_k = trace.checkpoints.get(&cfg.k).cloned().ok_or_else(|| {
        LotteryError::Invalid(format!(
            "snapshot epoch {} is past the first run's stopping epoch {}",
            cfg.k, trace.stopped_epoch
        ))
    })?;
    let baseline = outcome(0, 0.0, &model, None, data, &trace)?;

    let variant = if cfg.k == 0 { Variant::OriginalInit } else { Variant::LateReset };
    let mut metadata = BTreeMap::new();
    metadata.insert("prune_rate".to_string(), cfg.prune.rate.to_string());
    metadata.insert("prune_scope".to_string(), cfg.prune.scope.to_string());
    metadata.insert("head_prunable".to_string(), (!cfg.prune.exclude_head).to_string());
    metadata.insert("retrain".to_string(), "reset-then-retrain".to_string());
    let bundle = |mask: &Mask, theta: ParamSnapshot, variant: Variant| TicketBundle {
        mask: mask.clone(),
        theta,
        variant,
        k: cfg.k,
        round: mask.round,
        source_dataset: data.name.clone(),
        model_spec: spec.clone(),
        init_seed: init.seed,
        created_by: CREATED_BY.to_string(),
        metadata: metadata.clone(),
    };

    let mut run = LadderRun {
        ladder: TicketLadder::default(),
        fully_trained: Vec::new(),
        baseline,
        rounds: Vec::new(),
        aborted: None,
    };
    let mut mask = Mask::ones(&model);
    for round in 1..=cfg.rounds {
        mask = match magnitude_prune(&model, &mask, &cfg.prune) {
            Ok(m) => m,
            Err(e) => {
                run.aborted = Some(format!("round {round}: {e}"));
                break;
            }
        };
        let mut ticket = late_reset(&model, &theta_k, &mask)?;
        run.ladder.bundles.push(bundle(&mask, ticket.snapshot(), variant));
        match train(&mut ticket, data, &cfg.train, Some(&mask), &BTreeSet::new()) {
            Ok(trace) => {
                run.rounds.push(outcome(round, mask.sparsity(), &ticket, Some(&mask), data, &trace)?);
                run.fully_trained.push(bundle(&mask, ticket.snapshot(), Variant::FullyTrained));
                model = ticket;
            }
            Err(e @ TrainError::Diverged { .. }) => {
                run.aborted = Some(format!("round {round}: {e}"));
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(run)
}

/// Same mask, weights re-drawn from `fresh_seed` and masked.
pub fn random_reinit_control(bundle: &TicketBundle, fresh_seed: u64) -> Result<TicketBundle, LotteryError> {
    if fresh_seed == bundle.init_seed {
        return Err(LotteryError::SameSeed(fresh_seed));
    }
    let mut model = build_model(&bundle.model_spec, &InitSpec::xavier(fresh_seed))?;
    apply_mask(&mut model, &bundle.mask)?;
    let mut out = bundle.clone();
    out.theta = model.snapshot();
    out.variant = Variant::RandomReinit;
    out.metadata.insert("reinit_seed".to_string(), fresh_seed.to_string());
    Ok(out)
}

/// The end-of-training bundle for `round` of a ladder run.
pub fn fully_trained_variant(run: &LadderRun, round: usize) -> Result<TicketBundle, LotteryError> {
    run.fully_trained
        .iter()
        .find(|b| b.round == round)
        .cloned()
        .ok_or_else(|| LotteryError::Invalid(format!("no fully trained weights kept for round {round}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SynthKind};
    use crate::model::Architecture;

    fn setup() -> (ModelSpec, DatasetSplit, FindConfig) {
        let data = make_synthetic(SynthKind::NaturalProxy, 3, 30, 4, 2).unwrap();
        let spec = ModelSpec::new(Architecture::Mlp { hidden: vec![12] }, data.input_shape.clone(), 3).unwrap();
        let cfg = FindConfig {
            rounds: 3,
            k: 1,
            train: TrainConfig {
                max_epochs: 3,
                batch_size: 16,
                ..TrainConfig::default()
            },
            prune: PruneConfig::default(),
        };
        (spec, data, cfg)
    }

    #[test]
    fn ladder_sparsity_follows_schedule() {
        let (spec, data, cfg) = setup();
        let run = find_tickets(&spec, &InitSpec::xavier(4), &data, &cfg).unwrap();
        assert!(run.aborted.is_none());
        assert_eq!(run.ladder.len(), 3);
        run.ladder.check().unwrap();
        let total = run.ladder.bundles[0].mask.total();
        for b in &run.ladder.bundles {
            assert_eq!(b.mask.survivors(), crate::pruning::surviving_count(total, b.round, 0.2));
            b.validate().unwrap();
        }
    }

    #[test]
    fn same_seed_same_masks() {
        let (spec, data, cfg) = setup();
        let a = find_tickets(&spec, &InitSpec::xavier(4), &data, &cfg).unwrap();
        let b = find_tickets(&spec, &InitSpec::xavier(4), &data, &cfg).unwrap();
        assert_eq!(a.ladder, b.ladder);
    }

    #[test]
    fn k_past_stopping_is_rejected() {
        let (spec, data, mut cfg) = setup();
        cfg.k = 4;
        assert!(matches!(
            find_tickets(&spec, &InitSpec::xavier(4), &data, &cfg),
            Err(LotteryError::Invalid(_))
        ));
    }

    #[test]
    fn control_keeps_mask_and_changes_weights() {
        let (spec, data, cfg) = setup();
        let run = find_tickets(&spec, &InitSpec::xavier(4), &data, &cfg).unwrap();
        let b = &run.ladder.bundles[1];
        assert!(matches!(random_reinit_control(b, 4), Err(LotteryError::SameSeed(4))));
        let c = random_reinit_control(b, 99).unwrap();
        assert_eq!(c.mask, b.mask);
        assert_eq!(c.variant, Variant::RandomReinit);
        c.validate().unwrap();
    }

    #[test]
    fn fully_trained_differs_only_in_weights() {
        let (spec, data, cfg) = setup();
        let run = find_tickets(&spec, &InitSpec::xavier(4), &data, &cfg).unwrap();
        let ft = fully_trained_variant(&run, 2).unwrap();
        let lr = run.ladder.get(2).unwrap();
        assert_eq!(ft.mask, lr.mask);
        assert_ne!(ft.variant, lr.variant);
        assert_ne!(ft.theta, lr.theta);
        assert!(fully_trained_variant(&run, 9).is_err());
    }
}
