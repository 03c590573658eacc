//! Sweep results: per-cell rows, seed aggregates, csv and summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::SweepError;
use crate::transfer::ArmKind;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub target: String,
    pub arm: ArmKind,
    pub source: String,
    pub round: usize,
    pub seed: u64,
    pub sparsity: f64,
    pub test_accuracy: f64,
    pub epochs: usize,
    pub best_val_epoch: usize,
}

impl ReportRow {
    fn key(&self) -> (&str, ArmKind, &str, usize, u64) {
        (&self.target, self.arm, &self.source, self.round, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailedCell {
    pub target: String,
    pub arm: ArmKind,
    pub source: String,
    pub round: usize,
    pub seed: u64,
    pub error: String,
}

/// Seed statistics of one (target, arm, source, round) group.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub target: String,
    pub arm: ArmKind,
    pub source: String,
    pub round: usize,
    pub sparsity: f64,
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation; absent below two seeds.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepReport {
    pub rows: Vec<ReportRow>,
    pub failures: Vec<FailedCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Table,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            other => Err(format!("unknown report format {other:?} (csv | table)")),
        }
    }
}

/// Mean and population standard deviation (`None` below two values).
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt());
    (mean, std)
}

const HEADER: [&str; 12] = [
    "record",
    "target",
    "arm",
    "source",
    "round",
    "seed",
    "sparsity",
    "test_accuracy",
    "std",
    "n",
    "epochs",
    "best_val_epoch",
];

impl SweepReport {
    /// Sorts rows and failures and rejects duplicate cells.
    pub fn new(mut rows: Vec<ReportRow>, mut failures: Vec<FailedCell>) -> Result<Self, SweepError> {
        rows.sort_by(|a, b| a.key().cmp(&b.key()));
        failures.sort_by(|a, b| {
            (&a.target, a.arm, &a.source, a.round, a.seed).cmp(&(&b.target, b.arm, &b.source, b.round, b.seed))
        });
        if let Some(w) = rows.windows(2).find(|w| w[0].key() == w[1].key()) {
            return Err(SweepError::Report(format!("duplicate cell {:?}", w[0].key())));
        }
        Ok(SweepReport { rows, failures })
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.failures.is_empty()
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<(&str, ArmKind, &str, usize), Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((&r.target, r.arm, &r.source, r.round)).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((target, arm, source, round), rows)| {
                let acc: Vec<f64> = rows.iter().map(|r| r.test_accuracy).collect();
                let (mean, std) = mean_std(&acc);
                Aggregate {
                    target: target.to_string(),
                    arm,
                    source: source.to_string(),
                    round,
                    sparsity: rows.iter().map(|r| r.sparsity).sum::<f64>() / rows.len() as f64,
                    n: rows.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    /// For every (target, arm, source), the round with the highest seed-mean
    /// accuracy; ties go to the lower round.
    pub fn best_rounds(&self) -> Vec<Aggregate> {
        let mut best: BTreeMap<(String, ArmKind, String), Aggregate> = BTreeMap::new();
        for a in self.aggregates() {
            let key = (a.target.clone(), a.arm, a.source.clone());
            match best.get(&key) {
                Some(b) if b.mean > a.mean || (b.mean == a.mean && b.round <= a.round) => {}
                _ => {
                    best.insert(key, a);
                }
            }
        }
        best.into_values().collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).unwrap();
        for r in &self.rows {
            w.write_record([
                "cell".to_string(),
                r.target.clone(),
                r.arm.to_string(),
                r.source.clone(),
                r.round.to_string(),
                r.seed.to_string(),
                r.sparsity.to_string(),
                r.test_accuracy.to_string(),
                String::new(),
                String::new(),
                r.epochs.to_string(),
                r.best_val_epoch.to_string(),
            ])
            .unwrap();
        }
        for f in &self.failures {
            w.write_record([
                "failed".to_string(),
                f.target.clone(),
                f.arm.to_string(),
                f.source.clone(),
                f.round.to_string(),
                f.seed.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                f.error.clone(),
            ])
            .unwrap();
        }
        for a in self.aggregates() {
            w.write_record([
                "aggregate".to_string(),
                a.target,
                a.arm.to_string(),
                a.source,
                a.round.to_string(),
                String::new(),
                a.sparsity.to_string(),
                a.mean.to_string(),
                a.std.map(|s| s.to_string()).unwrap_or_default(),
                a.n.to_string(),
                String::new(),
                String::new(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    /// Inverse of [`SweepReport::to_csv`]; aggregate records are recomputed
    /// from the cells rather than read.
    pub fn from_csv(text: &str) -> Result<Self, SweepError> {
        let bad = |msg: String| SweepError::Report(msg);
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        if headers.iter().ne(HEADER) {
            return Err(bad(format!("unexpected header {headers:?}")));
        }
        let mut rows = Vec::new();
        let mut failures = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let field = |j: usize| rec.get(j).unwrap_or("");
            let parse_err = |j: usize| bad(format!("record {}: bad {} {:?}", i + 1, HEADER[j], field(j)));
            macro_rules! num {
                ($j:expr) => {
                    field($j).parse().map_err(|_| parse_err($j))?
                };
            }
            let arm: ArmKind = field(2).parse().map_err(|_| parse_err(2))?;
            match field(0) {
                "cell" => rows.push(ReportRow {
                    target: field(1).to_string(),
                    arm,
                    source: field(3).to_string(),
                    round: num!(4),
                    seed: num!(5),
                    sparsity: num!(6),
                    test_accuracy: num!(7),
                    epochs: num!(10),
                    best_val_epoch: num!(11),
                }),
                "failed" => failures.push(FailedCell {
                    target: field(1).to_string(),
                    arm,
                    source: field(3).to_string(),
                    round: num!(4),
                    seed: num!(5),
                    error: field(11).to_string(),
                }),
                "aggregate" => {}
                other => return Err(bad(format!("record {}: unknown kind {other:?}", i + 1))),
            }
        }
        SweepReport::new(rows, failures)
    }

    /// Per target, one line per (arm, source) at its best round, accuracy as
    /// `mean±std` in percent. The top arm of each target is starred.
    pub fn to_table(&self) -> String {
        let best = self.best_rounds();
        let mut by_target: BTreeMap<&str, Vec<&Aggregate>> = BTreeMap::new();
        for a in &best {
            by_target.entry(&a.target).or_default().push(a);
        }
        let mut s = String::new();
        for (target, arms) in by_target {
            let top = arms.iter().map(|a| a.mean).fold(f64::NEG_INFINITY, f64::max);
            writeln!(s, "target: {target}").unwrap();
            writeln!(
                s,
                "  {:<24} {:<16} {:>5} {:>8} {:>15} {:>5}",
                "arm", "source", "round", "pruned", "accuracy (%)", "seeds"
            )
            .unwrap();
            for a in arms {
                let acc = match a.std {
                    Some(sd) => format!("{:.2}±{:.2}", a.mean * 100.0, sd * 100.0),
                    None => format!("{:.2}", a.mean * 100.0),
                };
                writeln!(
                    s,
                    "  {:<24} {:<16} {:>5} {:>7.2}% {:>15} {:>5}{}",
                    a.arm.name(),
                    if a.source.is_empty() { "-" } else { &a.source },
                    a.round,
                    a.sparsity * 100.0,
                    acc,
                    a.n,
                    if a.mean == top { "  *best" } else { "" }
                )
                .unwrap();
            }
        }
        if !self.failures.is_empty() {
            writeln!(s, "failed cells: {}", self.failures.len()).unwrap();
            for f in &self.failures {
                writeln!(s, "  {} {} {} round {} seed {}: {}", f.target, f.arm, f.source, f.round, f.seed, f.error).unwrap();
            }
        }
        s
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Table => self.to_table(),
        }
    }
}

/// Writes `report` to `path` in `format`.
pub fn emit_report(report: &SweepReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), SweepError> {
    if report.is_empty() {
        return Err(SweepError::Report("nothing to report".into()));
    }
    let path = path.as_ref();
    std::fs::write(path, report.render(format)).map_err(|e| SweepError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(arm: ArmKind, round: usize, seed: u64, acc: f64) -> ReportRow {
        ReportRow {
            target: "tex".into(),
            arm,
            source: if arm.uses_ticket() { "nat".into() } else { String::new() },
            round,
            seed,
            sparsity: 1.0 - 0.8f64.powi(round as i32),
            test_accuracy: acc,
            epochs: 7,
            best_val_epoch: 2,
        }
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.5, 0.7, 0.6, 0.8]);
        assert!((m - 0.65).abs() < 1e-15);
        // sqrt(((.15)^2 + (.05)^2 * 2 + (.15)^2) / 4) = sqrt(0.0125)
        assert!((s.unwrap() - 0.0125f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.3]).1, None);
    }

    #[test]
    fn best_round_ties_go_low() {
        let rep = SweepReport::new(
            vec![
                row(ArmKind::SourceTicket, 1, 0, 0.6),
                row(ArmKind::SourceTicket, 2, 0, 0.7),
                row(ArmKind::SourceTicket, 3, 0, 0.7),
                row(ArmKind::ScratchUnpruned, 0, 0, 0.65),
            ],
            vec![],
        )
        .unwrap();
        let best = rep.best_rounds();
        let src = best.iter().find(|a| a.arm == ArmKind::SourceTicket).unwrap();
        assert_eq!(src.round, 2);
        let table = rep.to_table();
        assert!(table.lines().any(|l| l.contains("source_ticket") && l.ends_with("*best")));
        assert!(table.contains("65.00"));
    }

    #[test]
    fn csv_round_trip() {
        let rep = SweepReport::new(
            vec![
                row(ArmKind::SourceTicket, 1, 1, 0.1 + 0.2),
                row(ArmKind::SourceTicket, 1, 0, 2.0 / 3.0),
                row(ArmKind::ScratchUnpruned, 0, 0, 0.5),
            ],
            vec![FailedCell {
                target: "tex".into(),
                arm: ArmKind::RandomReinit,
                source: "nat, with comma".into(),
                round: 1,
                seed: 0,
                error: "diverged: \"nan\"".into(),
            }],
        )
        .unwrap();
        let csv = rep.to_csv();
        let back = SweepReport::from_csv(&csv).unwrap();
        assert_eq!(back, rep);
        assert_eq!(back.to_csv(), csv);
    }

    #[test]
    fn table_shows_mean_and_std() {
        let rep = SweepReport::new(
            vec![row(ArmKind::ScratchUnpruned, 0, 0, 0.7185 - 0.0112), row(ArmKind::ScratchUnpruned, 0, 1, 0.7185 + 0.0112)],
            vec![],
        )
        .unwrap();
        assert!(rep.to_table().contains("71.85±1.12"));
    }

    #[test]
    fn duplicates_rejected() {
        let r = row(ArmKind::ScratchUnpruned, 0, 0, 0.5);
        assert!(SweepReport::new(vec![r.clone(), r], vec![]).is_err());
    }
}
