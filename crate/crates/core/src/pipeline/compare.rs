//! Merging finished runs into one ranked table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{summary_field, RunConfig, StrategyId, CONFIG_FILE, METRICS_FILE};
use crate::error::{Error, Result};
use crate::seg::{MetricsRow, PATHOLOGY_GROUPS};

/// Scores of one finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub strategy: StrategyId,
    pub seed: u64,
    pub fingerprint: String,
    pub rows: Vec<MetricsRow>,
}

impl RunRecord {
    pub fn row(&self, group: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.pathology == group)
    }

    pub fn overall_mdice(&self) -> f64 {
        self.row("ALL").map_or(f64::NEG_INFINITY, |r| r.mdice)
    }
}

#[derive(Deserialize)]
struct CsvRow {
    #[allow(dead_code)]
    strategy: String,
    pathology: String,
    images: usize,
    mdice: f64,
    miou: f64,
}

pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let path = dir.join(METRICS_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let rows = csv::Reader::from_reader(text.as_slice())
        .deserialize::<CsvRow>()
        .map(|r| {
            r.map(|r| MetricsRow {
                pathology: r.pathology,
                images: r.images,
                mdice: r.mdice,
                miou: r.miou,
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        strategy: config.strategy,
        seed: config.seed,
        fingerprint: summary_field(dir, "fingerprint")?,
        rows,
    })
}

/// Runs ranked by overall mDice (descending); ties keep strategy-name
/// order, then seed order.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub fingerprint: String,
    pub runs: Vec<RunRecord>,
}

pub fn compare_runs(dirs: &[PathBuf]) -> Result<Comparison> {
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    Comparison::new(runs)
}

impl Comparison {
    pub fn new(mut runs: Vec<RunRecord>) -> Result<Self> {
        let Some(first) = runs.first() else {
            return Err(Error::InvalidArgument("no runs to compare".into()));
        };
        let fingerprint = first.fingerprint.clone();
        if let Some(other) = runs.iter().find(|r| r.fingerprint != fingerprint) {
            return Err(Error::Dataset(format!(
                "dataset fingerprints differ: {} has {}, {} has {}",
                first.dir.display(),
                fingerprint,
                other.dir.display(),
                other.fingerprint
            )));
        }
        runs.sort_by(|a, b| {
            b.overall_mdice()
                .total_cmp(&a.overall_mdice())
                .then_with(|| a.strategy.label().cmp(b.strategy.label()))
                .then_with(|| a.seed.cmp(&b.seed))
        });
        Ok(Comparison { fingerprint, runs })
    }

    pub fn groups() -> Vec<&'static str> {
        PATHOLOGY_GROUPS.iter().copied().chain(["ALL"]).collect()
    }

    fn cells(run: &RunRecord) -> Vec<Option<(f64, f64)>> {
        Self::groups()
            .iter()
            .map(|g| run.row(g).map(|r| (r.mdice, r.miou)))
            .collect()
    }

    /// Number of metric cells: runs × groups × {mDice, mIoU}.
    pub fn cell_count(&self) -> usize {
        self.runs.len() * Self::groups().len() * 2
    }

    /// Aligned text table, scores in percent.
    pub fn render(&self) -> String {
        let groups = Self::groups();
        let mut s = format!("{:<8} {:>5}", "strategy", "seed");
        for g in &groups {
            s.push_str(&format!(" | {:>6} {:>6}", format!("{g}"), ""));
        }
        s.push('\n');
        s.push_str(&format!("{:<8} {:>5}", "", ""));
        for _ in &groups {
            s.push_str(&format!(" | {:>6} {:>6}", "mDice", "mIoU"));
        }
        s.push('\n');
        for run in &self.runs {
            s.push_str(&format!("{:<8} {:>5}", run.strategy.label(), run.seed));
            for cell in Self::cells(run) {
                match cell {
                    Some((d, i)) => s.push_str(&format!(" | {:>6.2} {:>6.2}", 100.0 * d, 100.0 * i)),
                    None => s.push_str(&format!(" | {:>6} {:>6}", "-", "-")),
                }
            }
            s.push('\n');
        }
        s
    }

    /// `strategy,seed,<group>_mdice,<group>_miou,…` as fractions.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,seed");
        for g in Self::groups() {
            s.push_str(&format!(",{g}_mdice,{g}_miou"));
        }
        s.push('\n');
        for run in &self.runs {
            s.push_str(&format!("{},{}", run.strategy.label(), run.seed));
            for cell in Self::cells(run) {
                match cell {
                    Some((d, i)) => s.push_str(&format!(",{d:.6},{i:.6}")),
                    None => s.push_str(",,"),
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(strategy: StrategyId, all: f64, fp: &str) -> RunRecord {
        let rows = Comparison::groups()
            .into_iter()
            .map(|g| MetricsRow {
                pathology: g.to_string(),
                images: 10,
                mdice: all,
                miou: all * 0.9,
            })
            .collect();
        RunRecord {
            dir: PathBuf::from(strategy.as_str()),
            strategy,
            seed: 42,
            fingerprint: fp.to_string(),
            rows,
        }
    }

    #[test]
    fn single_run_is_one_row() {
        let c = Comparison::new(vec![record(StrategyId::Stl, 0.9, "f")]).unwrap();
        assert_eq!(c.runs.len(), 1);
        assert_eq!(c.render().lines().count(), 3);
        assert!(Comparison::new(vec![]).is_err());
    }

    #[test]
    fn sorted_by_overall_with_name_tie_break() {
        let c = Comparison::new(vec![
            record(StrategyId::Tlora, 0.9, "f"),
            record(StrategyId::Tape, 0.95, "f"),
            record(StrategyId::Dlora, 0.9, "f"),
        ])
        .unwrap();
        let order: Vec<_> = c.runs.iter().map(|r| r.strategy).collect();
        assert_eq!(order, vec![StrategyId::Tape, StrategyId::Dlora, StrategyId::Tlora]);
    }

    #[test]
    fn seven_strategies_make_seventy_cells() {
        let c = Comparison::new(StrategyId::ALL.iter().map(|&s| record(s, 0.8, "f")).collect()).unwrap();
        assert_eq!(c.cell_count(), 70);
        let csv = c.to_csv();
        let data_cells: usize = csv.lines().skip(1).map(|l| l.split(',').count() - 2).sum();
        assert_eq!(data_cells, 70);
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let err = Comparison::new(vec![
            record(StrategyId::Stl, 0.9, "a"),
            record(StrategyId::Tape, 0.9, "b"),
        ]);
        assert!(matches!(err, Err(Error::Dataset(_))));
    }
}
