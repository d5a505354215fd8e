use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;

use clare_core::harness::{
    load_data, resolve, run_config, ConfigLayer, DatasetKind, ExperimentConfig, Mode, ReplayMode, RunError,
};
use clare_core::numkit::OptimizerKind;
use clare_core::protocol::StartMode;

/// Class-incremental training with a conditional VAE replay memory.
#[derive(Debug, Parser)]
#[command(name = "clare", version)]
struct Cli {
    /// TOML file with any of the settings below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// clare, joint or finetune.
    #[arg(long)]
    mode: Option<Mode>,
    /// mnist or toy.
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long, env = "CLARE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Classes per increment.
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Weight of the KL term.
    #[arg(long)]
    beta: Option<f64>,
    /// on or off.
    #[arg(long)]
    replay: Option<ReplayMode>,
    /// scratch or warm.
    #[arg(long)]
    start: Option<StartMode>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds; one run each, then mean and sd.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Where to write the TOML report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write per-class accuracies as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Directory for replay buffers as IDX files.
    #[arg(long)]
    dump_replay: Option<PathBuf>,
    /// Number of toy classes.
    #[arg(long)]
    toy_classes: Option<usize>,
}

impl Cli {
    fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            mode: self.mode,
            dataset: self.dataset,
            data_dir: self.data_dir.clone(),
            g: self.g,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            optimizer: self.optimizer,
            latent_dim: self.latent_dim,
            beta: self.beta,
            replay: self.replay,
            start: self.start,
            seed: self.seed,
            seeds: self.seeds.clone(),
            out: self.out.clone(),
            csv: self.csv.clone(),
            dump_replay: self.dump_replay.clone(),
            toy: self.toy_classes.map(|n| clare_core::harness::ToyLayer {
                n_classes: Some(n),
                ..Default::default()
            }),
            ..ConfigLayer::default()
        }
    }
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let file = cli
        .config
        .as_deref()
        .map(ConfigLayer::read)
        .transpose()
        .map_err(|e| Failure::Usage(e.into()))?;
    let config = resolve(file.as_ref(), &cli.layer()).map_err(|e| Failure::Usage(e.into()))?;
    for w in config.warnings() {
        eprintln!("warning: {w}");
    }
    let data = load_data(&config).map_err(classify)?;
    eprintln!(
        "{:?} on {:?}: {} train / {} test samples, g = {}, seeds {:?}",
        config.mode,
        config.dataset,
        data.train.len(),
        data.test.len(),
        config.g,
        config.effective_seeds()
    );
    let report = run_config(&config, &data, &mut |line| eprintln!("{line}")).map_err(classify)?;
    print!("{}", report.render_table());
    write_outputs(&config, &report).map_err(Failure::Runtime)
}

fn classify(e: RunError) -> Failure {
    if e.is_usage() {
        Failure::Usage(e.into())
    } else {
        Failure::Runtime(e.into())
    }
}

fn write_outputs(config: &ExperimentConfig, report: &clare_core::harness::ResultsReport) -> anyhow::Result<()> {
    if let Some(path) = &config.out {
        report.save(path)?;
        eprintln!("report written to {}", path.display());
    }
    if let Some(path) = &config.csv {
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        report.write_csv(file)?;
    }
    if config.mode == Mode::Clare && config.replay == ReplayMode::Off {
        eprintln!("note: results above were produced without replay");
    }
    Ok(())
}
