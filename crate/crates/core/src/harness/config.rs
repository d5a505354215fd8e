use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::ToySpec;
use crate::model::MAX_LATENT_DIM;
use crate::numkit::OptimizerKind;
use crate::protocol::{StartMode, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Clare,
    Joint,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    On,
    Off,
}

macro_rules! from_str_lowercase {
    ($ty:ty, $($name:literal => $variant:expr),+) => {
        impl std::str::FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(format!(
                        "unknown value `{other}` (expected one of: {})",
                        [$($name),+].join(", ")
                    )),
                }
            }
        }
    };
}

from_str_lowercase!(Mode, "clare" => Mode::Clare, "joint" => Mode::Joint, "finetune" => Mode::Finetune);
from_str_lowercase!(DatasetKind, "mnist" => DatasetKind::Mnist, "toy" => DatasetKind::Toy);
from_str_lowercase!(ReplayMode, "on" => ReplayMode::On, "off" => ReplayMode::Off);

/// Fully resolved settings of one invocation, echoed into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub dataset: DatasetKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub g: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub latent_dim: usize,
    pub beta: f64,
    pub replay: ReplayMode,
    pub start: StartMode,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub seed: u64,
    /// Runs one experiment per seed when non-empty; `seed` is ignored then.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump_replay: Option<PathBuf>,
    pub toy: ToySpec,
    pub toy_test_per_class: usize,
}

impl ExperimentConfig {
    pub fn defaults(dataset: DatasetKind) -> Self {
        let train = TrainConfig::default();
        let mut c = Self {
            mode: Mode::Clare,
            dataset,
            data_dir: None,
            g: 1,
            epochs: train.epochs,
            batch: train.batch_size,
            lr: train.lr,
            optimizer: train.optimizer,
            latent_dim: train.latent_dim,
            beta: train.beta,
            replay: ReplayMode::On,
            start: train.start,
            encoder_hidden: train.encoder_hidden,
            decoder_hidden: train.decoder_hidden,
            seed: 0,
            seeds: Vec::new(),
            out: None,
            csv: None,
            dump_replay: None,
            toy: ToySpec::default(),
            toy_test_per_class: 200,
        };
        if dataset == DatasetKind::Toy {
            c.epochs = 20;
            c.batch = 32;
            c.lr = 2e-3;
            c.latent_dim = 4;
            c.encoder_hidden = vec![64, 32];
            c.decoder_hidden = vec![32, 64];
        }
        c
    }

    /// Seeds to run, in order.
    pub fn effective_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Training settings after the mode's overrides: fine-tuning always
    /// warm-starts without replay.
    pub fn train_config(&self) -> TrainConfig {
        let (replay, start) = match self.mode {
            Mode::Finetune => (false, StartMode::Warm),
            _ => (self.replay == ReplayMode::On, self.start),
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            optimizer: self.optimizer,
            latent_dim: self.latent_dim,
            beta: self.beta,
            replay,
            start,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
        }
    }

    /// Non-fatal remarks about the combination of settings.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.mode == Mode::Clare && self.replay == ReplayMode::Off {
            out.push("replay is off in clare mode: running as a no-replay ablation".to_string());
        }
        if self.mode == Mode::Joint && self.g != 1 {
            out.push("joint mode trains on all classes at once; --g is ignored".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.g == 0 {
            return bad("g must be at least 1".into());
        }
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be a positive number, got {}", self.lr));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be a non-negative number, got {}", self.beta));
        }
        if self.latent_dim == 0 || self.latent_dim > MAX_LATENT_DIM {
            return bad(format!("latent-dim must be in 1..={MAX_LATENT_DIM}, got {}", self.latent_dim));
        }
        if self.encoder_hidden.is_empty() || self.decoder_hidden.is_empty() {
            return bad("encoder_hidden and decoder_hidden need at least one layer".into());
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&h| h == 0) {
            return bad("hidden layer widths must be positive".into());
        }
        // report files store integers as signed 64-bit
        if let Some(s) = self.effective_seeds().into_iter().find(|&s| s > i64::MAX as u64) {
            return bad(format!("seed {s} exceeds {}", i64::MAX));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad("seeds must be distinct".into());
        }
        if self.dataset == DatasetKind::Toy {
            let t = &self.toy;
            if t.n_classes == 0 || t.n_per_class == 0 || t.dim == 0 || self.toy_test_per_class == 0 {
                return bad("toy class count, sizes and dim must be positive".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Config layer where every field is optional; used for the file and the
/// command line before they are merged over the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub mode: Option<Mode>,
    pub dataset: Option<DatasetKind>,
    pub data_dir: Option<PathBuf>,
    pub g: Option<usize>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub latent_dim: Option<usize>,
    pub beta: Option<f64>,
    pub replay: Option<ReplayMode>,
    pub start: Option<StartMode>,
    pub encoder_hidden: Option<Vec<usize>>,
    pub decoder_hidden: Option<Vec<usize>>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub dump_replay: Option<PathBuf>,
    pub toy: Option<ToyLayer>,
    pub toy_test_per_class: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLayer {
    pub n_classes: Option<usize>,
    pub n_per_class: Option<usize>,
    pub dim: Option<usize>,
    pub spread: Option<f64>,
    pub seed: Option<u64>,
}

impl ConfigLayer {
    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    fn apply(&self, c: &mut ExperimentConfig) {
        macro_rules! set {
            ($($f:ident),+) => { $(if let Some(v) = &self.$f { c.$f = v.clone(); })+ };
        }
        set!(mode, dataset, g, epochs, batch, lr, optimizer, latent_dim, beta, replay, start);
        set!(encoder_hidden, decoder_hidden, seed, seeds, toy_test_per_class);
        macro_rules! set_opt {
            ($($f:ident),+) => { $(if let Some(v) = &self.$f { c.$f = Some(v.clone()); })+ };
        }
        set_opt!(data_dir, out, csv, dump_replay);
        if let Some(t) = &self.toy {
            macro_rules! set_toy {
                ($($f:ident),+) => { $(if let Some(v) = t.$f { c.toy.$f = v; })+ };
            }
            set_toy!(n_classes, n_per_class, dim, spread, seed);
        }
    }
}

/// Defaults for the chosen dataset, then `file`, then `flags`.
pub fn resolve(file: Option<&ConfigLayer>, flags: &ConfigLayer) -> Result<ExperimentConfig, ConfigError> {
    let dataset = flags
        .dataset
        .or(file.and_then(|f| f.dataset))
        .unwrap_or(DatasetKind::Mnist);
    let mut c = ExperimentConfig::defaults(dataset);
    if let Some(f) = file {
        f.apply(&mut c);
    }
    flags.apply(&mut c);
    // `--seed` on the command line wins over a `seeds` list from the file.
    if flags.seed.is_some() && flags.seeds.is_none() {
        c.seeds.clear();
    }
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::defaults(DatasetKind::Mnist);
        c.data_dir = Some("/tmp/mnist".into());
        c.seeds = vec![1, 2, 3];
        c.lr = 0.000_314_159_265_358_979_3;
        let text = c.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        let t = ExperimentConfig::defaults(DatasetKind::Toy);
        assert_eq!(ExperimentConfig::from_toml(&t.to_toml()).unwrap(), t);
    }

    #[test]
    fn flags_override_file_over_defaults() {
        let file: ConfigLayer = toml::from_str("dataset = \"toy\"\nepochs = 3\nbatch = 7\nseeds = [4, 5]\n[toy]\nn_classes = 3\n").unwrap();
        let flags = ConfigLayer {
            epochs: Some(9),
            seed: Some(11),
            ..ConfigLayer::default()
        };
        let c = resolve(Some(&file), &flags).unwrap();
        assert_eq!(c.dataset, DatasetKind::Toy);
        assert_eq!((c.epochs, c.batch), (9, 7));
        assert_eq!(c.latent_dim, 4);
        assert_eq!(c.toy.n_classes, 3);
        assert_eq!(c.effective_seeds(), vec![11]);
        let c = resolve(Some(&file), &ConfigLayer::default()).unwrap();
        assert_eq!(c.effective_seeds(), vec![4, 5]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(toml::from_str::<ConfigLayer>("epoch = 3").is_err());
        for flags in [
            ConfigLayer { g: Some(0), ..Default::default() },
            ConfigLayer { lr: Some(-1.0), ..Default::default() },
            ConfigLayer { latent_dim: Some(257), ..Default::default() },
            ConfigLayer { seeds: Some(vec![1, 1]), ..Default::default() },
            ConfigLayer { seed: Some(u64::MAX), ..Default::default() },
        ] {
            assert!(resolve(None, &flags).is_err(), "{flags:?}");
        }
    }

    #[test]
    fn mode_overrides() {
        let mut c = ExperimentConfig::defaults(DatasetKind::Toy);
        c.mode = Mode::Finetune;
        let t = c.train_config();
        assert!(!t.replay);
        assert_eq!(t.start, StartMode::Warm);
        c.mode = Mode::Clare;
        c.replay = ReplayMode::Off;
        assert_eq!(c.warnings().len(), 1);
        assert!(!c.train_config().replay);
    }
}
