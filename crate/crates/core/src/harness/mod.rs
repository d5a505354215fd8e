//! Experiment configuration, evaluation metrics and result reports.

pub mod config;
pub mod metrics;
pub mod report;
pub mod run;

pub use config::{resolve, ConfigError, ConfigLayer, DatasetKind, ExperimentConfig, Mode, ReplayMode, ToyLayer};
pub use metrics::{argmax_rows, average_over_tasks, evaluate, score, ClassAccuracy, EvalError, Evaluation};
pub use report::{Aggregate, MeanSd, ReportError, ResultsReport, SeedRun, Summary, REPORT_VERSION};
pub use run::{load_data, run_config, RunError};
