//! Incremental training phases, the joint and fine-tuning baselines.

mod schedule;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DataError, DataSplits, LabeledDataset};
use crate::harness::metrics::{evaluate, ClassAccuracy, EvalError};
use crate::model::{ClareModel, ModelConfig, ModelError};
use crate::numkit::rng::{derive_seed, permutation, seeded, standard_normal, stream};
use crate::numkit::{OptimizerKind, OptimizerState, Tensor};
use crate::replay::{balance_counts, generate_replay, DecoderSnapshot, ReplayBuffer, ReplayError};

pub use schedule::{build_schedule, ClassMap, Schedule};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("class {0} was already learned in an earlier increment")]
    Overlap(u32),
    #[error("increment has no training data")]
    EmptyGroup,
    #[error("test split has no samples of seen class {0}")]
    MissingTestClass(u32),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartMode {
    /// Fresh weights every increment.
    Scratch,
    /// Keep the previous model and widen it with `expand_classes`.
    Warm,
}

impl std::str::FromStr for StartMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scratch" => Ok(Self::Scratch),
            "warm" => Ok(Self::Warm),
            other => Err(format!("unknown start mode `{other}` (expected scratch or warm)")),
        }
    }
}

/// Per-increment training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub latent_dim: usize,
    pub beta: f64,
    pub replay: bool,
    pub start: StartMode,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 128,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            latent_dim: 64,
            beta: 1.0,
            replay: true,
            start: StartMode::Scratch,
            encoder_hidden: vec![512, 256],
            decoder_hidden: vec![256, 512],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: &str| Err(ProtocolError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be a positive number");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be a non-negative number");
        }
        Ok(())
    }

    fn model_config(&self, input_dim: usize, class_no: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            latent_dim: self.latent_dim,
            class_no,
        }
    }
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub total: f64,
    pub classification: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Outcome of one increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub increment: usize,
    pub new_classes: Vec<u32>,
    pub classes_seen: Vec<u32>,
    /// Percent correct over the test split restricted to `classes_seen`.
    pub overall_accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub train_samples: usize,
    pub replay_samples: usize,
    pub wall_clock_secs: f64,
    pub epochs: Vec<EpochTrace>,
}

/// Everything carried from one increment to the next.
#[derive(Debug, Clone, Default)]
pub struct IncrementState {
    class_map: ClassMap,
    model: Option<ClareModel>,
    snapshot: Option<DecoderSnapshot>,
    history: Vec<MetricsRecord>,
}

impl IncrementState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.class_map
    }

    /// Learned dataset class ids, in model index order.
    pub fn learned(&self) -> &[u32] {
        self.class_map.ids()
    }

    pub fn model(&self) -> Option<&ClareModel> {
        self.model.as_ref()
    }

    pub fn snapshot(&self) -> Option<&DecoderSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.history
    }

    pub fn into_history(self) -> Vec<MetricsRecord> {
        self.history
    }
}

/// Seed of phase `index` under `master`.
pub fn phase_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, index as u64)
}

/// [`run_increment_with`] without a replay observer.
pub fn run_increment(
    state: IncrementState,
    new_data: &LabeledDataset,
    test: &LabeledDataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<IncrementState, ProtocolError> {
    run_increment_with(state, new_data, test, config, seed, &mut |_| Ok(()))
}

/// One phase: replay, merge, (re)build the model, train, snapshot, evaluate.
///
/// `new_data` holds only the new group's classes; `test` may hold any
/// classes and is restricted to the seen ones here. `on_replay` sees the
/// generated buffer before training starts.
pub fn run_increment_with(
    mut state: IncrementState,
    new_data: &LabeledDataset,
    test: &LabeledDataset,
    config: &TrainConfig,
    seed: u64,
    on_replay: &mut dyn FnMut(&ReplayBuffer) -> Result<(), ProtocolError>,
) -> Result<IncrementState, ProtocolError> {
    config.validate()?;
    let started = Instant::now();
    if new_data.is_empty() {
        return Err(ProtocolError::EmptyGroup);
    }
    let new_ids = new_data.class_ids();
    if let Some(&c) = new_ids.iter().find(|&&c| state.class_map.index_of(c).is_some()) {
        return Err(ProtocolError::Overlap(c));
    }
    let increment = state.history.len();
    let old_count = state.class_map.len();
    let mut class_map = state.class_map.clone();
    class_map.extend(&new_ids);

    // (1) replay for the learned classes
    let replay = match (&state.snapshot, config.replay && old_count > 0) {
        (Some(snapshot), true) => {
            let new_counts: BTreeMap<usize, usize> = new_data
                .class_counts()
                .into_iter()
                .map(|(c, n)| (class_map.index_of(c).expect("just mapped"), n))
                .collect();
            let learned: Vec<usize> = (0..old_count).collect();
            let counts = balance_counts(&learned, &new_counts)?;
            let buffer = generate_replay(snapshot, &counts, derive_seed(seed, stream::REPLAY))?;
            on_replay(&buffer)?;
            Some(buffer)
        }
        _ => None,
    };

    // (2) merged training set in model index space
    let mut labels: Vec<usize> = new_data
        .labels()
        .iter()
        .map(|&c| class_map.index_of(c).expect("just mapped"))
        .collect();
    let (images, replay_samples) = match &replay {
        Some(buf) => {
            labels.extend_from_slice(&buf.labels);
            (Tensor::concat_rows(&[new_data.images(), &buf.images]).map_err(ModelError::from)?, buf.len())
        }
        None => (new_data.images().clone(), 0),
    };
    drop(replay);

    // (3) model for |learned ∪ new| classes
    let class_no = class_map.len();
    let mut model = match (config.start, state.model.take()) {
        (StartMode::Warm, Some(prev)) => prev.expand_classes(class_no, &mut seeded(derive_seed(seed, stream::EXPAND)))?,
        _ => ClareModel::new(
            config.model_config(new_data.dim(), class_no),
            &mut seeded(derive_seed(seed, stream::INIT)),
        )?,
    };

    // (4) train
    let epochs = train(&mut model, &images, &labels, config, seed)?;
    drop(images);

    // (5) snapshot, (6) evaluate on seen classes
    let snapshot = DecoderSnapshot::take(&model, increment)?;
    let seen: Vec<u32> = class_map.ids().to_vec();
    let test_seen = test.subset_by_classes(&test.class_ids().into_iter().filter(|c| seen.contains(c)).collect::<Vec<_>>())?;
    if let Some(&c) = seen.iter().find(|c| test_seen.rows_of(**c).is_empty()) {
        return Err(ProtocolError::MissingTestClass(c));
    }
    let eval = evaluate(&model, &test_seen, class_map.ids())?;

    let mut sorted_seen = seen;
    sorted_seen.sort_unstable();
    state.history.push(MetricsRecord {
        increment,
        new_classes: new_ids,
        classes_seen: sorted_seen,
        overall_accuracy: eval.overall,
        per_class: eval.per_class,
        train_samples: labels.len(),
        replay_samples,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        epochs,
    });
    state.class_map = class_map;
    state.model = Some(model);
    state.snapshot = Some(snapshot);
    Ok(state)
}

/// Minibatch training with one shuffle per epoch and fresh noise per batch.
fn train(
    model: &mut ClareModel,
    images: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochTrace>, ProtocolError> {
    let n = labels.len();
    let mut optimizer = OptimizerState::new(config.optimizer, config.lr, model.tape()).map_err(ModelError::from)?;
    let mut shuffle = seeded(derive_seed(seed, stream::SHUFFLE));
    let mut noise = seeded(derive_seed(seed, stream::NOISE));
    let mut traces = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = permutation(&mut shuffle, n);
        let mut sums = [0.0; 4];
        for rows in order.chunks(config.batch_size) {
            let x = images.gather_rows(rows);
            let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let eps = standard_normal(&mut noise, &[rows.len(), model.latent_dim()]);
            let l = model.train_step(&mut optimizer, &x, &y, &eps, config.beta)?;
            let w = rows.len() as f64;
            for (s, v) in sums.iter_mut().zip([l.total, l.classification, l.reconstruction, l.kl]) {
                *s += w * v;
            }
        }
        let [total, classification, reconstruction, kl] = sums.map(|s| s / n as f64);
        traces.push(EpochTrace {
            epoch,
            total,
            classification,
            reconstruction,
            kl,
        });
    }
    Ok(traces)
}

fn check_coverage(data: &DataSplits, schedule: &Schedule) -> Result<(), ProtocolError> {
    let mut scheduled: Vec<u32> = schedule.groups().iter().flatten().copied().collect();
    scheduled.sort_unstable();
    let present = data.train.class_ids();
    if scheduled != present {
        return Err(ProtocolError::Schedule(format!(
            "schedule covers classes {scheduled:?} but the training data has {present:?}"
        )));
    }
    Ok(())
}

/// Folds [`run_increment`] over the schedule.
pub fn run_experiment(
    data: &DataSplits,
    schedule: &Schedule,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<MetricsRecord>, ProtocolError> {
    run_experiment_with(data, schedule, config, seed, |_, _| Ok(()))
}

/// [`run_experiment`] with an observer receiving `(increment, buffer)` for
/// every generated replay buffer.
pub fn run_experiment_with(
    data: &DataSplits,
    schedule: &Schedule,
    config: &TrainConfig,
    seed: u64,
    mut on_replay: impl FnMut(usize, &ReplayBuffer) -> Result<(), ProtocolError>,
) -> Result<Vec<MetricsRecord>, ProtocolError> {
    Ok(run_experiment_state(data, schedule, config, seed, &mut on_replay)?.into_history())
}

/// Like [`run_experiment_with`] but returns the final state, model included.
pub fn run_experiment_state(
    data: &DataSplits,
    schedule: &Schedule,
    config: &TrainConfig,
    seed: u64,
    on_replay: &mut dyn FnMut(usize, &ReplayBuffer) -> Result<(), ProtocolError>,
) -> Result<IncrementState, ProtocolError> {
    config.validate()?;
    check_coverage(data, schedule)?;
    let mut state = IncrementState::new();
    for (i, group) in schedule.groups().iter().enumerate() {
        let new_data = data.train.subset_by_classes(group)?;
        state = run_increment_with(state, &new_data, &data.test, config, phase_seed(seed, i), &mut |buf| {
            on_replay(i, buf)
        })?;
    }
    Ok(state)
}

/// One model on every class at once: a single-group [`run_experiment`].
pub fn run_joint_baseline(data: &DataSplits, config: &TrainConfig, seed: u64) -> Result<MetricsRecord, ProtocolError> {
    let ids = data.train.class_ids();
    let schedule = build_schedule(&ids, ids.len().max(1))?;
    let mut records = run_experiment(data, &schedule, config, seed)?;
    Ok(records.pop().expect("one group yields one record"))
}

/// Sequential fine-tuning: warm start, no replay.
pub fn run_finetune_baseline(
    data: &DataSplits,
    schedule: &Schedule,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<MetricsRecord>, ProtocolError> {
    let config = TrainConfig {
        replay: false,
        start: StartMode::Warm,
        ..config.clone()
    };
    run_experiment(data, schedule, &config, seed)
}

#[cfg(test)]
mod tests;
