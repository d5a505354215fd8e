use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::ExperimentConfig;
use super::metrics::average_over_tasks;
use crate::protocol::MetricsRecord;

pub const REPORT_VERSION: u32 = 1;

/// Tolerance used when checking stored summaries against their records.
const SUMMARY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report version {found} is not supported (expected {REPORT_VERSION})")]
    Version { found: u32 },
    #[error("report summary does not match its records: {0}")]
    Inconsistent(String),
    #[error("cannot aggregate: {0}")]
    Aggregate(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed report: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("report cannot be serialized: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("csv export: {0}")]
    Csv(#[from] csv::Error),
}

/// Figures derived from one seed's records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tasks: usize,
    pub final_accuracy: f64,
    /// Mean of the first 5 increments' overall accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_10: Option<f64>,
}

impl Summary {
    pub fn from_records(records: &[MetricsRecord]) -> Self {
        let overall: Vec<f64> = records.iter().map(|r| r.overall_accuracy).collect();
        Self {
            tasks: overall.len(),
            final_accuracy: overall.last().copied().unwrap_or(f64::NAN),
            avg_5: average_over_tasks(&overall, 5).ok(),
            avg_10: average_over_tasks(&overall, 10).ok(),
        }
    }

    fn matches(&self, other: &Self) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= SUMMARY_TOL * a.abs().max(1.0);
        let close_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (None, None) => true,
            (Some(a), Some(b)) => close(a, b),
            _ => false,
        };
        self.tasks == other.tasks
            && close(self.final_accuracy, other.final_accuracy)
            && close_opt(self.avg_5, other.avg_5)
            && close_opt(self.avg_10, other.avg_10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub summary: Summary,
    pub wall_clock_secs: f64,
    pub records: Vec<MetricsRecord>,
}

impl SeedRun {
    pub fn new(seed: u64, records: Vec<MetricsRecord>, wall_clock_secs: f64) -> Self {
        Self {
            seed,
            summary: Summary::from_records(&records),
            wall_clock_secs,
            records,
        }
    }
}

/// Mean and sample standard deviation over seeds. `sd` is absent for a
/// single seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (n > 1).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Some(Self { mean, sd, n })
    }

    fn close(&self, other: &Self) -> bool {
        let c = |a: f64, b: f64| (a - b).abs() <= SUMMARY_TOL * a.abs().max(1.0);
        self.n == other.n
            && c(self.mean, other.mean)
            && match (self.sd, other.sd) {
                (None, None) => true,
                (Some(a), Some(b)) => c(a, b),
                _ => false,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementAggregate {
    pub increment: usize,
    pub overall: MeanSd,
}

/// Across-seed statistics; every seed must have the same number of
/// increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub final_accuracy: MeanSd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_5: Option<MeanSd>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_10: Option<MeanSd>,
    pub increments: Vec<IncrementAggregate>,
}

impl Aggregate {
    pub fn from_runs(runs: &[SeedRun]) -> Result<Self, ReportError> {
        let first = runs.first().ok_or_else(|| ReportError::Aggregate("no runs".into()))?;
        let tasks = first.records.len();
        if let Some(r) = runs.iter().find(|r| r.records.len() != tasks) {
            return Err(ReportError::Aggregate(format!(
                "seed {} has {} increments, seed {} has {tasks}",
                r.seed,
                r.records.len(),
                first.seed
            )));
        }
        if tasks == 0 {
            return Err(ReportError::Aggregate("runs have no increments".into()));
        }
        let summaries: Vec<Summary> = runs.iter().map(|r| Summary::from_records(&r.records)).collect();
        let collect = |f: &dyn Fn(&Summary) -> Option<f64>| -> Option<MeanSd> {
            let v: Option<Vec<f64>> = summaries.iter().map(f).collect();
            v.and_then(|v| MeanSd::of(&v))
        };
        let increments = (0..tasks)
            .map(|i| IncrementAggregate {
                increment: i,
                overall: MeanSd::of(&runs.iter().map(|r| r.records[i].overall_accuracy).collect::<Vec<_>>())
                    .expect("at least one run"),
            })
            .collect();
        Ok(Self {
            seeds: runs.iter().map(|r| r.seed).collect(),
            final_accuracy: collect(&|s| Some(s.final_accuracy)).expect("at least one run"),
            avg_5: collect(&|s| s.avg_5),
            avg_10: collect(&|s| s.avg_10),
            increments,
        })
    }

    fn matches(&self, other: &Self) -> bool {
        let opt = |a: &Option<MeanSd>, b: &Option<MeanSd>| match (a, b) {
            (None, None) => true,
            (Some(a), Some(b)) => a.close(b),
            _ => false,
        };
        self.seeds == other.seeds
            && self.final_accuracy.close(&other.final_accuracy)
            && opt(&self.avg_5, &other.avg_5)
            && opt(&self.avg_10, &other.avg_10)
            && self.increments.len() == other.increments.len()
            && self
                .increments
                .iter()
                .zip(&other.increments)
                .all(|(a, b)| a.increment == b.increment && a.overall.close(&b.overall))
    }
}

/// Everything one invocation produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsReport {
    pub version: u32,
    pub artifact: String,
    /// Accuracies are percent on the test split restricted to classes seen
    /// so far, measured after the last epoch of each increment.
    pub conventions: String,
    pub total_wall_clock_secs: f64,
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
    pub runs: Vec<SeedRun>,
}

pub const CONVENTIONS: &str = "percent correct on test classes seen so far, last epoch of each increment; \
aggregates are mean and sample sd (n-1) over seeds";

impl ResultsReport {
    pub fn new(config: ExperimentConfig, runs: Vec<SeedRun>, total_wall_clock_secs: f64) -> Result<Self, ReportError> {
        let aggregate = if runs.len() > 1 { Some(Aggregate::from_runs(&runs)?) } else { None };
        Ok(Self {
            version: REPORT_VERSION,
            artifact: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            conventions: CONVENTIONS.to_string(),
            total_wall_clock_secs,
            config,
            aggregate,
            runs,
        })
    }

    /// Checks version and that every stored summary is recomputable from the
    /// stored records.
    pub fn validate(&self) -> Result<(), ReportError> {
        if self.version != REPORT_VERSION {
            return Err(ReportError::Version { found: self.version });
        }
        for run in &self.runs {
            if !run.summary.matches(&Summary::from_records(&run.records)) {
                return Err(ReportError::Inconsistent(format!("summary of seed {}", run.seed)));
            }
        }
        match (&self.aggregate, self.runs.len() > 1) {
            (Some(a), true) => {
                if !a.matches(&Aggregate::from_runs(&self.runs)?) {
                    return Err(ReportError::Inconsistent("aggregate".into()));
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(ReportError::Inconsistent("aggregate present for a single run".into())),
            (None, true) => return Err(ReportError::Inconsistent("aggregate missing for several runs".into())),
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, ReportError> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, ReportError> {
        // check the version before the full schema so old files get a clear error
        #[derive(Deserialize)]
        struct Head {
            version: u32,
        }
        let head: Head = toml::from_str::<toml::Table>(text)?
            .try_into()
            .map_err(ReportError::Parse)?;
        if head.version != REPORT_VERSION {
            return Err(ReportError::Version { found: head.version });
        }
        let report: Self = toml::from_str(text)?;
        report.validate()?;
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        let text = self.to_toml()?;
        std::fs::write(path, text).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Copy with every wall-clock field zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.total_wall_clock_secs = 0.0;
        for run in &mut r.runs {
            run.wall_clock_secs = 0.0;
            for rec in &mut run.records {
                rec.wall_clock_secs = 0.0;
            }
        }
        r
    }

    /// Equal apart from timings.
    pub fn same_results(&self, other: &Self) -> bool {
        self.without_timings() == other.without_timings()
    }

    /// One row per (seed, increment, class) plus an `overall` row per
    /// increment.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), ReportError> {
        #[derive(Serialize)]
        struct Row<'a> {
            seed: u64,
            increment: usize,
            class: &'a str,
            accuracy: f64,
            samples: usize,
        }
        let mut w = csv::Writer::from_writer(out);
        for run in &self.runs {
            for rec in &run.records {
                let total: usize = rec.per_class.iter().map(|c| c.samples).sum();
                for c in &rec.per_class {
                    w.serialize(Row {
                        seed: run.seed,
                        increment: rec.increment,
                        class: &c.class.to_string(),
                        accuracy: c.accuracy,
                        samples: c.samples,
                    })?;
                }
                w.serialize(Row {
                    seed: run.seed,
                    increment: rec.increment,
                    class: "overall",
                    accuracy: rec.overall_accuracy,
                    samples: total,
                })?;
            }
        }
        w.flush().map_err(|e| ReportError::Csv(e.into()))?;
        Ok(())
    }

    /// Plain-text table: one column per increment, one row per seed, then
    /// the task averages.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let Some(first) = self.runs.first() else {
            return "no runs\n".into();
        };
        let _ = writeln!(s, "mode {:?}, g = {}, accuracy (%) after each increment", self.config.mode, self.config.g);
        let _ = write!(s, "{:>10}", "seed");
        for rec in &first.records {
            let _ = write!(s, " {:>13}", classes_label(&rec.new_classes));
        }
        let _ = writeln!(s, " {:>8} {:>8}", "avg5", "avg10");
        let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        for run in &self.runs {
            let _ = write!(s, "{:>10}", run.seed);
            for rec in &run.records {
                let _ = write!(s, " {:>13.1}", rec.overall_accuracy);
            }
            let _ = writeln!(s, " {:>8} {:>8}", fmt_opt(run.summary.avg_5), fmt_opt(run.summary.avg_10));
        }
        if let Some(a) = &self.aggregate {
            let pm = |m: &MeanSd| format!("{:.1}±{:.1}", m.mean, m.sd.unwrap_or(0.0));
            let _ = write!(s, "{:>10}", "mean±sd");
            for inc in &a.increments {
                let _ = write!(s, " {:>13}", pm(&inc.overall));
            }
            let _ = writeln!(
                s,
                " {:>8} {:>8}",
                a.avg_5.as_ref().map_or("-".into(), pm),
                a.avg_10.as_ref().map_or("-".into(), pm)
            );
        }
        s
    }
}

fn classes_label(ids: &[u32]) -> String {
    match ids {
        [] => "-".into(),
        [one] => format!("{one}"),
        [a, .., b] if ids.windows(2).all(|w| w[1] == w[0] + 1) => format!("{a}-{b}"),
        _ => ids.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
    }
}
