//! Resumable experiment sweeps.
//!
//! Every (target, arm, source, round, seed) cell writes one small result
//! file under `OUT/cells/<plan-hash>/`. Cells whose file already exists are
//! skipped, so an interrupted sweep picks up where it stopped and the
//! assembled report does not depend on how often it was resumed.

mod plan;
mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DataError, DatasetSplit};
use crate::lottery::load_ticket;
use crate::model::ModelSpec;
use crate::seed::derive_seed;
use crate::transfer::{run_arm, ArmKind, ArmResult, TransferArm};

pub use crate::lottery::ticket_file_name;
pub use plan::{Plan, PlanArm};
pub use report::{emit_report, mean_std, Aggregate, FailedCell, ReportFormat, ReportRow, SweepReport};

pub const CELL_EXTENSION: &str = "cell";

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("plan: {0}")]
    Plan(String),
    #[error("report: {0}")]
    Report(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn io_err(path: &Path, e: std::io::Error) -> SweepError {
    SweepError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub target: String,
    pub arm: ArmKind,
    pub source: String,
    pub round: usize,
    pub seed: u64,
}

impl CellKey {
    pub fn file_name(&self) -> String {
        let clean = |s: &str| -> String {
            s.chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
                .collect()
        };
        format!(
            "{}__{}__{}__r{:02}__s{}.{CELL_EXTENSION}",
            clean(&self.target),
            self.arm,
            clean(&self.source),
            self.round,
            self.seed
        )
    }
}

/// Serialized outcome of one cell.
pub fn encode_cell(key: &CellKey, outcome: &Result<ArmResult, String>) -> String {
    let mut s = String::new();
    writeln!(s, "target={}", key.target).unwrap();
    writeln!(s, "arm={}", key.arm).unwrap();
    writeln!(s, "source={}", key.source).unwrap();
    writeln!(s, "round={}", key.round).unwrap();
    writeln!(s, "seed={}", key.seed).unwrap();
    match outcome {
        Ok(r) => {
            writeln!(s, "status=ok").unwrap();
            writeln!(s, "sparsity={}", r.sparsity).unwrap();
            writeln!(s, "test_accuracy={}", r.test_accuracy).unwrap();
            writeln!(s, "epochs={}", r.stopped_epoch).unwrap();
            writeln!(s, "best_val_epoch={}", r.best_val_epoch).unwrap();
        }
        Err(e) => {
            writeln!(s, "status=failed").unwrap();
            writeln!(s, "error={}", e.replace(['\n', '\r'], " ")).unwrap();
        }
    }
    s
}

pub fn decode_cell(text: &str) -> Result<Result<ReportRow, FailedCell>, SweepError> {
    let get = |key: &str| -> Result<&str, SweepError> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| SweepError::Report(format!("cell file lacks {key}")))
    };
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, SweepError> {
        v.parse().map_err(|_| SweepError::Report(format!("cell {key}={v:?}")))
    }
    let target = get("target")?.to_string();
    let arm: ArmKind = get("arm")?.parse().map_err(SweepError::Report)?;
    let source = get("source")?.to_string();
    let round = num("round", get("round")?)?;
    let seed = num("seed", get("seed")?)?;
    match get("status")? {
        "ok" => Ok(Ok(ReportRow {
            target,
            arm,
            source,
            round,
            seed,
            sparsity: num("sparsity", get("sparsity")?)?,
            test_accuracy: num("test_accuracy", get("test_accuracy")?)?,
            epochs: num("epochs", get("epochs")?)?,
            best_val_epoch: num("best_val_epoch", get("best_val_epoch")?)?,
        })),
        "failed" => Ok(Err(FailedCell {
            target,
            arm,
            source,
            round,
            seed,
            error: get("error")?.to_string(),
        })),
        other => Err(SweepError::Report(format!("cell status {other:?}"))),
    }
}

/// Writes a cell file via a temporary so readers never see half a file.
pub fn write_cell(dir: &Path, key: &CellKey, outcome: &Result<ArmResult, String>) -> Result<PathBuf, SweepError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(key.file_name());
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_cell(key, outcome)).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn cell_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), SweepError> {
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.is_dir() {
            cell_files(&path, out)?;
        } else if path.extension().is_some_and(|e| e == CELL_EXTENSION) {
            out.push(path);
        }
    }
    Ok(())
}

/// Report over every cell file below `dir`.
pub fn collect_cells(dir: impl AsRef<Path>) -> Result<SweepReport, SweepError> {
    let mut files = Vec::new();
    cell_files(dir.as_ref(), &mut files)?;
    files.sort();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| io_err(&f, e))?;
        match decode_cell(&text).map_err(|e| SweepError::Report(format!("{}: {e}", f.display())))? {
            Ok(r) => rows.push(r),
            Err(fc) => failures.push(fc),
        }
    }
    SweepReport::new(rows, failures)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepOptions {
    /// Cells run concurrently.
    pub jobs: usize,
    /// Run at most this many pending cells, then return.
    pub stop_after: Option<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            jobs: 1,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub plan_hash: String,
    pub cell_dir: PathBuf,
    pub total: usize,
    pub computed: usize,
    pub skipped: usize,
    /// Present once every cell has a file.
    pub report: Option<SweepReport>,
}

struct Cell {
    key: CellKey,
    arm_index: usize,
    ticket: Option<PathBuf>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of the plan and its target data.
pub fn plan_hash(plan: &Plan, target_bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(plan.canonical().as_bytes());
    h.update(Sha256::digest(target_bytes));
    hex(&h.finalize()[..8])
}

fn cells(plan: &Plan, target: &str) -> Vec<Cell> {
    let mut out = Vec::new();
    for (arm_index, arm) in plan.arms.iter().enumerate() {
        let rounds: &[usize] = if arm.kind.uses_ticket() { &plan.rounds } else { &[0] };
        for &round in rounds {
            for &seed in &plan.seeds {
                out.push(Cell {
                    key: CellKey {
                        target: target.to_string(),
                        arm: arm.kind,
                        source: arm.source.clone(),
                        round,
                        seed,
                    },
                    arm_index,
                    ticket: plan.ticket_path(arm, round, seed),
                });
            }
        }
    }
    out
}

fn run_cell(plan: &Plan, data: &DatasetSplit, cell: &Cell, run_seed: u64) -> Result<ArmResult, String> {
    let kind = plan.arms[cell.arm_index].kind;
    let arm = match &cell.ticket {
        Some(path) => {
            let bundle = load_ticket(path).map_err(|e| format!("{}: {e}", path.display()))?;
            TransferArm::with_ticket(kind, bundle, &data.name, run_seed)
        }
        None => {
            let arch = plan.model.clone().ok_or("scratch arm needs a model")?;
            ModelSpec::new(arch.clone(), data.input_shape.clone(), data.num_classes).map_err(|e| e.to_string())?;
            TransferArm::scratch(arch, &data.name, run_seed)
        }
    };
    let mut r = run_arm(&arm, data, &plan.train).map_err(|e| e.to_string())?;
    r.seed = cell.key.seed;
    Ok(r)
}

/// Runs every missing cell of `plan` (up to `opts.jobs` at a time) and,
/// once all cells exist, writes `report.csv` and `report.txt` into `out`.
///
/// All arms of one (target, seed) share a training seed derived from the
/// plan hash, so they see the same data order.
pub fn run_sweep(plan: &Plan, out: impl AsRef<Path>, opts: &SweepOptions) -> Result<SweepOutcome, SweepError> {
    let out = out.as_ref();
    let target_path = plan.target_path();
    let target_bytes = std::fs::read(&target_path).map_err(|e| io_err(&target_path, e))?;
    let data = crate::data::decode_dataset(&target_bytes)?;
    let hash = plan_hash(plan, &target_bytes);
    let plan_seed = u64::from_str_radix(&hash[..16], 16).expect("hex digest");
    let cell_dir = out.join("cells").join(&hash);
    std::fs::create_dir_all(&cell_dir).map_err(|e| io_err(&cell_dir, e))?;
    std::fs::write(cell_dir.join("plan.txt"), plan.canonical()).map_err(|e| io_err(&cell_dir, e))?;

    let all = cells(plan, &data.name);
    if let Some(missing) = all.iter().filter_map(|c| c.ticket.as_ref()).find(|p| !p.is_file()) {
        return Err(SweepError::Plan(format!("ticket {} does not exist", missing.display())));
    }
    let done = |c: &Cell| {
        std::fs::read_to_string(cell_dir.join(c.key.file_name()))
            .ok()
            .is_some_and(|t| decode_cell(&t).is_ok())
    };
    let mut pending: Vec<&Cell> = all.iter().filter(|c| !done(c)).collect();
    let skipped = all.len() - pending.len();
    if let Some(n) = opts.stop_after {
        pending.truncate(n);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| SweepError::Io(e.to_string()))?;
    let written: Vec<Result<PathBuf, SweepError>> = pool.install(|| {
        pending
            .par_iter()
            .map(|c| {
                let run_seed = derive_seed(plan_seed, &format!("{}/seed{}", c.key.target, c.key.seed));
                let outcome = run_cell(plan, &data, c, run_seed);
                write_cell(&cell_dir, &c.key, &outcome)
            })
            .collect()
    });
    for w in written {
        w?;
    }
    let computed = pending.len();
    let report = if all.iter().all(done) {
        let report = collect_cells(&cell_dir)?;
        std::fs::write(out.join("report.csv"), report.to_csv()).map_err(|e| io_err(out, e))?;
        std::fs::write(out.join("report.txt"), report.to_table()).map_err(|e| io_err(out, e))?;
        Some(report)
    } else {
        None
    };
    Ok(SweepOutcome {
        plan_hash: hash,
        cell_dir,
        total: all.len(),
        computed,
        skipped,
        report,
    })
}
