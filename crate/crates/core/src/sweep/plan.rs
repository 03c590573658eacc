//! Experiment plans.
//!
//! ```text
//! # everything after '#' is ignored
//! target = texture.lds
//! model = mini-resnet:1x8x1,2x16x1,2x32x1
//! seeds = 0,1,2,3
//! rounds = 1-3,5
//! max_epochs = 30
//!
//! [arms]
//! scratch_unpruned
//! source_ticket source=natural-proxy tickets=tickets/seed{seed}
//! random_reinit source=natural-proxy tickets=tickets/seed{seed}
//! ```
//!
//! Relative paths resolve against the plan file's directory. A ticket arm
//! reads `<tickets>/round_NN.ticket` (or `round_NN.fully_trained.ticket` for
//! `fully_trained_transfer`), with `{seed}` substituted.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::SweepError;
use crate::lottery::ticket_file_name;
use crate::model::{Architecture, TrainConfig};
use crate::transfer::ArmKind;

const TRAIN_KEYS: [&str; 8] = [
    "learning_rate",
    "momentum",
    "weight_decay",
    "batch_size",
    "patience",
    "anneal_epochs",
    "anneal_factor",
    "max_epochs",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PlanArm {
    pub kind: ArmKind,
    /// Label of the dataset the tickets came from.
    pub source: String,
    /// Ticket directory template; `{seed}` is replaced by the seed.
    pub tickets: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub target: PathBuf,
    pub model: Option<Architecture>,
    pub seeds: Vec<u64>,
    pub rounds: Vec<usize>,
    pub train: TrainConfig,
    pub arms: Vec<PlanArm>,
    pub base_dir: PathBuf,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, SweepError> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| SweepError::Plan(format!("bad {what} entry {t:?}"))))
        .collect()
}

fn parse_rounds(s: &str) -> Result<Vec<usize>, SweepError> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        let bad = || SweepError::Plan(format!("bad round {part:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

impl Plan {
    pub fn load(path: impl AsRef<Path>) -> Result<Plan, SweepError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SweepError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Plan::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Plan, SweepError> {
        let mut target = None;
        let mut model = None;
        let mut seeds = vec![0, 1, 2, 3];
        let mut rounds = None;
        let mut train = TrainConfig::default();
        let mut arms = Vec::new();
        let mut in_arms = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| SweepError::Plan(format!("line {}: {msg}", lineno + 1));
            if line == "[arms]" {
                in_arms = true;
                continue;
            }
            if in_arms {
                let mut words = line.split_whitespace();
                let kind: ArmKind = words.next().unwrap_or("").parse().map_err(err)?;
                let mut arm = PlanArm {
                    kind,
                    source: String::new(),
                    tickets: None,
                };
                for w in words {
                    match w.split_once('=') {
                        Some(("source", v)) => arm.source = v.to_string(),
                        Some(("tickets", v)) => arm.tickets = Some(v.to_string()),
                        _ => return Err(err(format!("unknown arm option {w:?}"))),
                    }
                }
                if kind.uses_ticket() && arm.tickets.is_none() {
                    return Err(err(format!("{kind} needs tickets=DIR")));
                }
                if !kind.uses_ticket() && (arm.tickets.is_some() || !arm.source.is_empty()) {
                    return Err(err(format!("{kind} takes no tickets")));
                }
                if arms.iter().any(|a: &PlanArm| a.kind == arm.kind && a.source == arm.source) {
                    return Err(err(format!("duplicate arm {kind} source={}", arm.source)));
                }
                arms.push(arm);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let bad = |e: String| err(format!("{key}: {e}"));
            match key {
                "target" => target = Some(PathBuf::from(value)),
                "model" => model = Some(value.parse::<Architecture>().map_err(|e| bad(e.to_string()))?),
                "seeds" => seeds = parse_list(value, "seed")?,
                "rounds" => rounds = Some(parse_rounds(value)?),
                "learning_rate" => train.learning_rate = value.parse().map_err(|_| bad(value.into()))?,
                "momentum" => train.momentum = value.parse().map_err(|_| bad(value.into()))?,
                "weight_decay" => train.weight_decay = value.parse().map_err(|_| bad(value.into()))?,
                "batch_size" => train.batch_size = value.parse().map_err(|_| bad(value.into()))?,
                "patience" => train.patience = value.parse().map_err(|_| bad(value.into()))?,
                "anneal_epochs" => {
                    train.anneal_epochs = if value.is_empty() { Vec::new() } else { parse_list(value, "epoch")? }
                }
                "anneal_factor" => train.anneal_factor = value.parse().map_err(|_| bad(value.into()))?,
                "max_epochs" => train.max_epochs = value.parse().map_err(|_| bad(value.into()))?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        let plan = Plan {
            target: target.ok_or_else(|| SweepError::Plan("missing target".into()))?,
            model,
            seeds,
            rounds: rounds.unwrap_or_default(),
            train,
            arms,
            base_dir: base_dir.into(),
        };
        plan.check()?;
        Ok(plan)
    }

    fn check(&self) -> Result<(), SweepError> {
        if self.arms.is_empty() {
            return Err(SweepError::Plan("no arms listed".into()));
        }
        if self.seeds.is_empty() {
            return Err(SweepError::Plan("no seeds".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(SweepError::Plan("repeated seed".into()));
        }
        if self.arms.iter().any(|a| a.kind.uses_ticket()) && self.rounds.is_empty() {
            return Err(SweepError::Plan("ticket arms need rounds".into()));
        }
        if self.rounds.contains(&0) {
            return Err(SweepError::Plan("rounds start at 1".into()));
        }
        if self.arms.iter().any(|a| !a.kind.uses_ticket()) && self.model.is_none() {
            return Err(SweepError::Plan("scratch arm needs model".into()));
        }
        self.train.validate().map_err(|e| SweepError::Plan(e.to_string()))
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn target_path(&self) -> PathBuf {
        self.resolve(&self.target.to_string_lossy())
    }

    /// Ticket file for a ticket arm at `(round, seed)`.
    pub fn ticket_path(&self, arm: &PlanArm, round: usize, seed: u64) -> Option<PathBuf> {
        let dir = arm.tickets.as_ref()?.replace("{seed}", &seed.to_string());
        Some(self.resolve(&dir).join(ticket_file_name(round, arm.kind == ArmKind::FullyTrainedTransfer)))
    }

    /// Normalized text, independent of comments, spacing and key order.
    pub fn canonical(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let join = |xs: &mut dyn Iterator<Item = String>| xs.collect::<Vec<_>>().join(",");
        writeln!(s, "target={}", self.target.display()).unwrap();
        if let Some(m) = &self.model {
            writeln!(s, "model={m}").unwrap();
        }
        writeln!(s, "seeds={}", join(&mut self.seeds.iter().map(u64::to_string))).unwrap();
        writeln!(s, "rounds={}", join(&mut self.rounds.iter().map(usize::to_string))).unwrap();
        let values = [
            t.learning_rate.to_string(),
            t.momentum.to_string(),
            t.weight_decay.to_string(),
            t.batch_size.to_string(),
            t.patience.to_string(),
            join(&mut t.anneal_epochs.iter().map(usize::to_string)),
            t.anneal_factor.to_string(),
            t.max_epochs.to_string(),
        ];
        for (k, v) in TRAIN_KEYS.iter().zip(values) {
            writeln!(s, "{k}={v}").unwrap();
        }
        s.push_str("[arms]\n");
        for a in &self.arms {
            write!(s, "{}", a.kind).unwrap();
            if !a.source.is_empty() {
                write!(s, " source={}", a.source).unwrap();
            }
            if let Some(t) = &a.tickets {
                write!(s, " tickets={t}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}
