//! Fine-tuning tickets on a target dataset, and the comparison arms.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{DatasetSplit, SplitKind};
use crate::init::InitSpec;
use crate::lottery::{random_reinit_control, LotteryError, TicketBundle, Variant};
use crate::model::{build_model, evaluate, replace_head, train, Architecture, ModelError, ModelSpec, ModelState, TrainConfig, TrainError, TrainTrace};
use crate::pruning::Mask;
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("ticket expects inputs {expected:?} but {dataset} has {got:?}")]
    InputShape {
        dataset: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("arm {arm} {problem}")]
    Arm { arm: ArmKind, problem: String },
    #[error(transparent)]
    Lottery(#[from] LotteryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArmKind {
    /// Unpruned network trained from a fresh draw on the target.
    ScratchUnpruned,
    /// Ticket found on another dataset, fine-tuned with a new head.
    SourceTicket,
    /// Ticket found on the target itself, retrained as is.
    TargetTicket,
    /// Source ticket's mask with freshly drawn weights.
    RandomReinit,
    /// Source mask with end-of-training weights.
    FullyTrainedTransfer,
}

impl ArmKind {
    pub const ALL: [ArmKind; 5] = [
        ArmKind::ScratchUnpruned,
        ArmKind::SourceTicket,
        ArmKind::TargetTicket,
        ArmKind::RandomReinit,
        ArmKind::FullyTrainedTransfer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArmKind::ScratchUnpruned => "scratch_unpruned",
            ArmKind::SourceTicket => "source_ticket",
            ArmKind::TargetTicket => "target_ticket",
            ArmKind::RandomReinit => "random_reinit",
            ArmKind::FullyTrainedTransfer => "fully_trained_transfer",
        }
    }

    pub fn uses_ticket(self) -> bool {
        self != ArmKind::ScratchUnpruned
    }
}

impl fmt::Display for ArmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArmKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scratch_unpruned" | "scratch" => Ok(ArmKind::ScratchUnpruned),
            "source_ticket" => Ok(ArmKind::SourceTicket),
            "target_ticket" => Ok(ArmKind::TargetTicket),
            "random_reinit" => Ok(ArmKind::RandomReinit),
            "fully_trained_transfer" | "fully_trained" => Ok(ArmKind::FullyTrainedTransfer),
            other => Err(format!(
                "unknown arm {other:?} (scratch_unpruned | source_ticket | target_ticket | random_reinit | fully_trained_transfer)"
            )),
        }
    }
}

/// One experimental condition on one target.
#[derive(Debug, Clone)]
pub struct TransferArm {
    pub kind: ArmKind,
    pub bundle: Option<TicketBundle>,
    /// Network trained by the scratch arm; ticket arms use the bundle's.
    pub architecture: Architecture,
    pub target_dataset: String,
    pub seed: u64,
}

impl TransferArm {
    pub fn scratch(architecture: Architecture, target_dataset: &str, seed: u64) -> Self {
        TransferArm {
            kind: ArmKind::ScratchUnpruned,
            bundle: None,
            architecture,
            target_dataset: target_dataset.to_string(),
            seed,
        }
    }

    pub fn with_ticket(kind: ArmKind, bundle: TicketBundle, target_dataset: &str, seed: u64) -> Self {
        TransferArm {
            kind,
            architecture: bundle.model_spec.arch.clone(),
            bundle: Some(bundle),
            target_dataset: target_dataset.to_string(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: ArmKind,
    pub source_dataset: String,
    pub target_dataset: String,
    pub round: usize,
    /// Zero fraction over masked parameters outside the head.
    pub sparsity: f64,
    pub test_accuracy: f64,
    pub best_val_epoch: usize,
    pub stopped_epoch: usize,
    pub seed: u64,
}

fn check_input(bundle: &TicketBundle, target: &DatasetSplit) -> Result<(), TransferError> {
    if bundle.model_spec.input_shape != target.input_shape {
        return Err(TransferError::InputShape {
            dataset: target.name.clone(),
            expected: bundle.model_spec.input_shape.clone(),
            got: target.input_shape.clone(),
        });
    }
    Ok(())
}

/// The ticket's network with a fresh head for `target` and its mask with
/// every head bit switched back on.
pub fn prepare_transfer(bundle: &TicketBundle, target: &DatasetSplit, head_seed: u64) -> Result<(ModelState, Mask), TransferError> {
    check_input(bundle, target)?;
    let model = replace_head(&bundle.to_model()?, target.num_classes, &InitSpec::xavier(head_seed))?;
    let mut mask = bundle.mask.clone();
    for p in model.params.iter().filter(|p| p.prunable && model.is_head(&p.name)) {
        mask.reset_entry(&p.name, p.value.shape());
    }
    Ok((model, mask))
}

fn finish(
    arm: ArmKind,
    bundle: Option<&TicketBundle>,
    target: &DatasetSplit,
    model: &ModelState,
    mask: Option<&Mask>,
    trace: &TrainTrace,
    seed: u64,
) -> Result<ArmResult, TransferError> {
    let eval = evaluate(model, mask, target, SplitKind::Test)?;
    Ok(ArmResult {
        arm,
        source_dataset: bundle.map_or_else(String::new, |b| b.source_dataset.clone()),
        target_dataset: target.name.clone(),
        round: bundle.map_or(0, |b| b.round),
        sparsity: bundle.map_or(0.0, TicketBundle::trunk_sparsity),
        test_accuracy: eval.accuracy,
        best_val_epoch: trace.best_val_epoch,
        stopped_epoch: trace.stopped_epoch,
        seed,
    })
}

/// Replaces the head, fine-tunes under the (fixed) mask and evaluates on the
/// target test split. The fresh head is drawn from `cfg.seed`.
pub fn transfer_ticket(bundle: &TicketBundle, target: &DatasetSplit, cfg: &TrainConfig) -> Result<ArmResult, TransferError> {
    transfer_as(ArmKind::SourceTicket, bundle, target, cfg)
}

fn transfer_as(arm: ArmKind, bundle: &TicketBundle, target: &DatasetSplit, cfg: &TrainConfig) -> Result<ArmResult, TransferError> {
    let (mut model, mask) = prepare_transfer(bundle, target, derive_seed(cfg.seed, "head"))?;
    let trace = train(&mut model, target, cfg, Some(&mask), &BTreeSet::new())?;
    finish(arm, Some(bundle), target, &model, Some(&mask), &trace, cfg.seed)
}

/// Unpruned training from a fresh draw seeded by `seed`.
pub fn scratch_baseline(spec: &ModelSpec, target: &DatasetSplit, cfg: &TrainConfig, seed: u64) -> Result<ArmResult, TransferError> {
    if spec.input_shape != target.input_shape {
        return Err(TransferError::InputShape {
            dataset: target.name.clone(),
            expected: spec.input_shape.clone(),
            got: target.input_shape.clone(),
        });
    }
    let mut model = build_model(spec, &InitSpec::xavier(seed))?;
    let cfg = cfg.with_seed(seed);
    let trace = train(&mut model, target, &cfg, None, &BTreeSet::new())?;
    finish(ArmKind::ScratchUnpruned, None, target, &model, None, &trace, seed)
}

/// Seed of the fresh weights for the reinit arm; never the ticket's own.
pub fn reinit_seed(arm_seed: u64, init_seed: u64) -> u64 {
    let s = derive_seed(arm_seed, "reinit");
    if s == init_seed {
        s.wrapping_add(1)
    } else {
        s
    }
}

/// Runs `arm` on `target`. The training config's seed is replaced by the
/// arm's seed so that all arms of one cell share one config.
pub fn run_arm(arm: &TransferArm, target: &DatasetSplit, cfg: &TrainConfig) -> Result<ArmResult, TransferError> {
    let cfg = cfg.with_seed(arm.seed);
    let need_bundle = || {
        arm.bundle.as_ref().ok_or_else(|| TransferError::Arm {
            arm: arm.kind,
            problem: "needs a ticket".into(),
        })
    };
    match arm.kind {
        ArmKind::ScratchUnpruned => {
            if arm.bundle.is_some() {
                return Err(TransferError::Arm {
                    arm: arm.kind,
                    problem: "takes no ticket".into(),
                });
            }
            let spec = ModelSpec::new(arm.architecture.clone(), target.input_shape.clone(), target.num_classes)?;
            scratch_baseline(&spec, target, &cfg, arm.seed)
        }
        ArmKind::SourceTicket => transfer_as(arm.kind, need_bundle()?, target, &cfg),
        ArmKind::TargetTicket => {
            let bundle = need_bundle()?;
            check_input(bundle, target)?;
            if bundle.model_spec.num_classes != target.num_classes {
                return Err(TransferError::Arm {
                    arm: arm.kind,
                    problem: format!("ticket has {} classes, target {}", bundle.model_spec.num_classes, target.num_classes),
                });
            }
            let mut model = bundle.to_model()?;
            let trace = train(&mut model, target, &cfg, Some(&bundle.mask), &BTreeSet::new())?;
            finish(arm.kind, Some(bundle), target, &model, Some(&bundle.mask), &trace, arm.seed)
        }
        ArmKind::RandomReinit => {
            let bundle = need_bundle()?;
            check_input(bundle, target)?;
            let control = random_reinit_control(bundle, reinit_seed(arm.seed, bundle.init_seed))?;
            transfer_as(arm.kind, &control, target, &cfg)
        }
        ArmKind::FullyTrainedTransfer => {
            let bundle = need_bundle()?;
            if bundle.variant != Variant::FullyTrained {
                return Err(TransferError::Arm {
                    arm: arm.kind,
                    problem: format!("needs fully trained weights, ticket is {}", bundle.variant),
                });
            }
            transfer_as(arm.kind, bundle, target, &cfg)
        }
    }
}
