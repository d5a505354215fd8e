use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use super::config::{DatasetKind, ExperimentConfig, Mode};
use super::report::{ReportError, ResultsReport, SeedRun};
use crate::dataio::{load_mnist, make_toy_splits, DataError, DataSplits};
use crate::protocol::{build_schedule, run_experiment_with, run_joint_baseline, ProtocolError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("no data directory given: pass --data-dir or set CLARE_DATA_DIR")]
    NoDataDir,
    #[error("data directory does not exist: {0}")]
    DataDirMissing(PathBuf),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl RunError {
    /// Problems the user can fix by changing the invocation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            RunError::NoDataDir | RunError::DataDirMissing(_) | RunError::Data(DataError::MissingFile(_))
        )
    }
}

pub fn load_data(config: &ExperimentConfig) -> Result<DataSplits, RunError> {
    match config.dataset {
        DatasetKind::Toy => Ok(make_toy_splits(&config.toy, config.toy_test_per_class)?),
        DatasetKind::Mnist => {
            let dir = config.data_dir.as_ref().ok_or(RunError::NoDataDir)?;
            if !dir.is_dir() {
                return Err(RunError::DataDirMissing(dir.clone()));
            }
            Ok(load_mnist(dir)?)
        }
    }
}

/// Runs every seed of `config` on `data`; `progress` receives one line per
/// finished seed.
pub fn run_config(
    config: &ExperimentConfig,
    data: &DataSplits,
    progress: &mut dyn FnMut(&str),
) -> Result<ResultsReport, RunError> {
    let start = Instant::now();
    let train = config.train_config();
    let ids = data.train.class_ids();
    let mut runs = Vec::new();
    for seed in config.effective_seeds() {
        let t = Instant::now();
        let records = match config.mode {
            Mode::Joint => vec![run_joint_baseline(data, &train, seed)?],
            Mode::Clare | Mode::Finetune => {
                let schedule = build_schedule(&ids, config.g)?;
                let dump = config.dump_replay.as_ref().map(|d| d.join(format!("seed-{seed}")));
                run_experiment_with(data, &schedule, &train, seed, |i, buf| {
                    let Some(dir) = &dump else { return Ok(()) };
                    let learned: Vec<u32> = schedule.groups()[..i].concat();
                    buf.dump_idx(dir.join(format!("increment-{i}")), |k| learned[k])?;
                    Ok(())
                })?
            }
        };
        let run = SeedRun::new(seed, records, t.elapsed().as_secs_f64());
        progress(&format!(
            "seed {seed}: {} increment(s), final accuracy {:.2}% in {:.1}s",
            run.records.len(),
            run.summary.final_accuracy,
            run.wall_clock_secs
        ));
        runs.push(run);
    }
    Ok(ResultsReport::new(config.clone(), runs, start.elapsed().as_secs_f64())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(mode: Mode) -> ExperimentConfig {
        let mut c = ExperimentConfig::defaults(DatasetKind::Toy);
        c.mode = mode;
        c.epochs = 2;
        c.toy.n_per_class = 60;
        c.toy_test_per_class = 20;
        c
    }

    #[test]
    fn modes_produce_expected_shapes() {
        let c = quick(Mode::Clare);
        let data = load_data(&c).unwrap();
        let r = run_config(&c, &data, &mut |_| {}).unwrap();
        assert_eq!(r.runs[0].records.len(), 2);
        r.validate().unwrap();
        let r = run_config(&quick(Mode::Joint), &data, &mut |_| {}).unwrap();
        assert_eq!(r.runs[0].records.len(), 1);
        let r = run_config(&quick(Mode::Finetune), &data, &mut |_| {}).unwrap();
        assert_eq!(r.runs[0].records[1].replay_samples, 0);
    }

    #[test]
    fn replay_dump_writes_idx_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = quick(Mode::Clare);
        c.dump_replay = Some(dir.path().to_path_buf());
        let data = load_data(&c).unwrap();
        run_config(&c, &data, &mut |_| {}).unwrap();
        let inc = dir.path().join("seed-0").join("increment-1");
        assert!(inc.join("replay-images-idx3-ubyte").is_file());
        assert!(inc.join("replay-labels-idx1-ubyte").is_file());
    }

    #[test]
    fn missing_mnist_dir_is_a_usage_error() {
        let mut c = ExperimentConfig::defaults(DatasetKind::Mnist);
        assert!(matches!(load_data(&c), Err(RunError::NoDataDir)));
        c.data_dir = Some("/nonexistent/mnist".into());
        let e = load_data(&c).unwrap_err();
        assert!(e.is_usage());
        assert!(e.to_string().contains("/nonexistent/mnist"));
    }
}
