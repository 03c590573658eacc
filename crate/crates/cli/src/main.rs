use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ticketlab::container::FormatError;
use ticketlab::data::{load_dataset, make_synthetic, save_dataset, subsample, DataError, DatasetSplit, SubsampleSpec, SynthKind};
use ticketlab::lottery::{find_tickets, load_ticket, save_ladder, FindConfig, LotteryError};
use ticketlab::model::{Architecture, ModelError, ModelSpec, TrainConfig, TrainError};
use ticketlab::pruning::{PruneConfig, PruneError, Scope};
use ticketlab::sweep::{collect_cells, emit_report, run_sweep, write_cell, CellKey, Plan, ReportFormat, SweepError, SweepOptions};
use ticketlab::transfer::{run_arm, scratch_baseline, ArmKind, TransferArm, TransferError};
use ticketlab::InitSpec;

#[derive(Parser)]
#[command(name = "ticketlab", version, about = "Find, transfer and compare winning tickets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides for the default training schedule.
#[derive(clap::Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Comma-separated epochs at which the learning rate drops tenfold.
    #[arg(long, value_delimiter = ',')]
    anneal_epochs: Option<Vec<usize>>,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::default().with_seed(seed);
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            c.max_epochs = v;
        }
        if let Some(v) = self.patience {
            c.patience = v;
        }
        if let Some(v) = &self.anneal_epochs {
            c.anneal_epochs = v.clone();
        }
        c
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container.
    Synth {
        #[arg(long)]
        kind: SynthKind,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterative magnitude pruning with late resetting.
    FindTickets(FindArgs),
    /// Fine-tune one ticket on a target dataset.
    Transfer {
        #[arg(long)]
        ticket: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "source_ticket")]
        arm: ArmKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train an unpruned network from scratch.
    Scratch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Architecture,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run every cell of an experiment plan, resuming from earlier runs.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Stop after computing this many cells.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Summarize the result cells found under a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified subsample of a dataset's training split.
    Subsample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct FindArgs {
    #[arg(long)]
    data: PathBuf,
    /// `mlp`, `mini-resnet`, or an explicit layout such as `mlp:300,100`.
    #[arg(long)]
    model: Architecture,
    #[arg(long, default_value_t = 31)]
    rounds: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0.2)]
    prune_rate: f64,
    #[arg(long, default_value = "global")]
    scope: Scope,
    /// Keep the classification head out of pruning.
    #[arg(long)]
    exclude_head: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

enum Failure {
    Usage(String),
    Data(String),
    Training(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Training(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Training(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Autodiff(_) => Failure::Training(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            TrainError::EmptySplit(_) | TrainError::Mask(_) => Failure::Data(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => Failure::Training(e.to_string()),
        }
    }
}

impl From<LotteryError> for Failure {
    fn from(e: LotteryError) -> Self {
        match e {
            LotteryError::Train(t) => t.into(),
            LotteryError::Model(m) => m.into(),
            LotteryError::Format(f) => f.into(),
            LotteryError::Prune(PruneError::RateOutOfRange(_)) => Failure::Usage(e.to_string()),
            LotteryError::Prune(PruneError::Incongruent(_)) => Failure::Data(e.to_string()),
            LotteryError::Prune(PruneError::LayerEmptied { .. }) | LotteryError::Invalid(_) => Failure::Training(e.to_string()),
            LotteryError::SameSeed(_) => Failure::Usage(e.to_string()),
        }
    }
}

impl From<TransferError> for Failure {
    fn from(e: TransferError) -> Self {
        match e {
            TransferError::InputShape { .. } => Failure::Data(e.to_string()),
            TransferError::Arm { .. } => Failure::Usage(e.to_string()),
            TransferError::Lottery(l) => l.into(),
            TransferError::Model(m) => m.into(),
            TransferError::Train(t) => t.into(),
        }
    }
}

impl From<SweepError> for Failure {
    fn from(e: SweepError) -> Self {
        Failure::Data(e.to_string())
    }
}

fn at(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn read_data(path: &Path) -> Result<DatasetSplit, Failure> {
    load_dataset(path).map_err(|e| at(path, e))
}

fn find(args: FindArgs) -> Result<(), Failure> {
    let data = read_data(&args.data)?;
    let spec = ModelSpec::new(args.model, data.input_shape.clone(), data.num_classes)?;
    let cfg = FindConfig {
        rounds: args.rounds,
        k: args.k,
        train: args.train.config(args.seed),
        prune: PruneConfig {
            rate: args.prune_rate,
            scope: args.scope,
            exclude_head: args.exclude_head,
            ..PruneConfig::default()
        },
    };
    if cfg.rounds == 0 {
        return Err(Failure::Usage("--rounds must be at least 1".into()));
    }
    if !(cfg.prune.rate > 0.0 && cfg.prune.rate < 1.0) {
        return Err(Failure::Usage(format!("--prune-rate must be in (0, 1), got {}", cfg.prune.rate)));
    }
    let run = find_tickets(&spec, &InitSpec::xavier(args.seed), &data, &cfg)?;
    save_ladder(&run, &args.out).map_err(|e| at(&args.out, e))?;
    for o in std::iter::once(&run.baseline).chain(&run.rounds) {
        eprintln!(
            "round {:>2}  sparsity {:>6.2}%  test accuracy {:.4}",
            o.round,
            o.sparsity * 100.0,
            o.test_accuracy
        );
    }
    match run.aborted {
        Some(why) => Err(Failure::Training(format!(
            "stopped after {} of {} rounds: {why}",
            run.rounds.len(),
            cfg.rounds
        ))),
        None => Ok(()),
    }
}

fn record(out: &Path, result: &ticketlab::transfer::ArmResult) -> Result<(), Failure> {
    let key = CellKey {
        target: result.target_dataset.clone(),
        arm: result.arm,
        source: result.source_dataset.clone(),
        round: result.round,
        seed: result.seed,
    };
    let path = write_cell(out, &key, &Ok(result.clone()))?;
    println!(
        "{} {} round {} sparsity {:.4} test accuracy {:.4} (best val epoch {}, stopped {}) -> {}",
        result.arm,
        result.target_dataset,
        result.round,
        result.sparsity,
        result.test_accuracy,
        result.best_val_epoch,
        result.stopped_epoch,
        path.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth {
            kind,
            classes,
            per_class,
            size,
            seed,
            out,
        } => {
            let ds = make_synthetic(kind, classes, per_class, size, seed)?;
            save_dataset(&ds, &out).map_err(|e| at(&out, e))?;
            eprintln!(
                "{}: {} train / {} validation / {} test samples of shape {:?}",
                ds.name,
                ds.train.len(),
                ds.validation.len(),
                ds.test.len(),
                ds.input_shape
            );
            Ok(())
        }
        Command::FindTickets(args) => find(args),
        Command::Transfer {
            ticket,
            data,
            arm,
            seed,
            out,
            train,
        } => {
            if !arm.uses_ticket() {
                return Err(Failure::Usage("use the scratch command for the scratch arm".into()));
            }
            let bundle = load_ticket(&ticket).map_err(|e| at(&ticket, e))?;
            let target = read_data(&data)?;
            let arm = TransferArm::with_ticket(arm, bundle, &target.name, seed);
            let result = run_arm(&arm, &target, &train.config(seed))?;
            record(&out, &result)
        }
        Command::Scratch {
            data,
            model,
            seed,
            out,
            train,
        } => {
            let target = read_data(&data)?;
            let spec = ModelSpec::new(model, target.input_shape.clone(), target.num_classes)?;
            let result = scratch_baseline(&spec, &target, &train.config(seed), seed)?;
            record(&out, &result)
        }
        Command::Sweep {
            plan,
            jobs,
            out,
            stop_after,
        } => {
            let plan = Plan::load(&plan)?;
            let outcome = run_sweep(
                &plan,
                &out,
                &SweepOptions {
                    jobs,
                    stop_after,
                },
            )?;
            eprintln!(
                "plan {}: {} cells, {} computed, {} already present",
                outcome.plan_hash, outcome.total, outcome.computed, outcome.skipped
            );
            match outcome.report {
                Some(r) if !r.failures.is_empty() => Err(Failure::Training(format!(
                    "{} of {} cells failed; see {}",
                    r.failures.len(),
                    outcome.total,
                    out.join("report.txt").display()
                ))),
                Some(r) => {
                    print!("{}", r.to_table());
                    Ok(())
                }
                None => {
                    eprintln!("sweep incomplete; rerun to resume");
                    Ok(())
                }
            }
        }
        Command::Report { input, format, out } => {
            let report = collect_cells(&input)?;
            emit_report(&report, format, &out)?;
            Ok(())
        }
        Command::Subsample {
            data,
            fraction,
            seed,
            out,
        } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Failure::Usage(format!("--fraction must be in (0, 1], got {fraction}")));
            }
            let ds = read_data(&data)?;
            let small = subsample(&ds, &SubsampleSpec::new(fraction, seed))?;
            save_dataset(&small, &out).map_err(|e| at(&out, e))?;
            eprintln!("kept {} of {} training samples", small.train.len(), ds.train.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
