//! Frozen decoder snapshots and the synthetic samples drawn from them.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::dataio::write_idx_pair;
use crate::model::{Checkpoint, CheckpointError, ClareModel, DecoderLayout, ModelError};
use crate::numkit::rng::{derive_seed, seeded, standard_normal};
use crate::numkit::{NumError, ParamTape, Tensor};

const INCREMENT_ENTRY: &str = "meta.increment";
const TRAINED_ENTRY: &str = "meta.trained";

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("replay requested for class {class}, but the snapshot knows only {class_no} classes")]
    UnknownClass { class: usize, class_no: usize },
    #[error("no new-class data to balance against")]
    EmptyNewData,
    #[error("new class {class} has no samples")]
    ZeroCount { class: usize },
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
    #[error("failed to write replay dump: {0}")]
    Io(#[from] std::io::Error),
}

impl From<NumError> for ReplayError {
    fn from(e: NumError) -> Self {
        Self::Model(e.into())
    }
}

impl From<CheckpointError> for ReplayError {
    fn from(e: CheckpointError) -> Self {
        Self::Model(e.into())
    }
}

/// Deep copy of a model's decoder, frozen at the end of an increment.
#[derive(Debug, Clone)]
pub struct DecoderSnapshot {
    tape: ParamTape,
    layout: DecoderLayout,
    class_no: usize,
    latent_dim: usize,
    increment: usize,
    trained: bool,
}

impl DecoderSnapshot {
    /// Copies the decoder of `model`. A model that has never taken an
    /// optimizer step is accepted but marked untrained.
    pub fn take(model: &ClareModel, increment: usize) -> Result<Self, ReplayError> {
        let (tape, layout) = model.decoder_layout().extract(model.tape())?;
        Ok(Self {
            tape,
            layout,
            class_no: model.class_no(),
            latent_dim: model.latent_dim(),
            increment,
            trained: model.steps() > 0,
        })
    }

    pub fn class_no(&self) -> usize {
        self.class_no
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layout.output_dim(&self.tape)
    }

    pub fn increment(&self) -> usize {
        self.increment
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tape.iter()
    }

    pub fn decode(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor, ModelError> {
        self.layout.decode(&self.tape, z, labels)
    }

    /// Decoder parameters plus `meta.increment` and `meta.trained` scalars.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries: Vec<(String, Tensor)> = self.tape.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        entries.push((INCREMENT_ENTRY.into(), Tensor::scalar(self.increment as f64)));
        entries.push((TRAINED_ENTRY.into(), Tensor::scalar(if self.trained { 1.0 } else { 0.0 })));
        Checkpoint {
            class_no: self.class_no as u32,
            latent_dim: self.latent_dim as u32,
            entries,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ReplayError> {
        let meta = |name: &str| -> Result<f64, ReplayError> {
            match ckpt.get(name).map(Tensor::data) {
                Some([v]) if *v >= 0.0 && v.fract() == 0.0 => Ok(*v),
                _ => Err(ReplayError::Snapshot(format!("missing or malformed `{name}`"))),
            }
        };
        let increment = meta(INCREMENT_ENTRY)? as usize;
        let trained = meta(TRAINED_ENTRY)? != 0.0;
        let mut tape = ParamTape::new();
        for (name, t) in &ckpt.entries {
            if name.starts_with("decoder.") {
                tape.push(name.clone(), t.clone())?;
            }
        }
        let layout = DecoderLayout::from_names(&tape)?;
        let (class_no, latent_dim) = (layout.class_no(&tape), layout.latent_dim(&tape));
        if class_no != ckpt.class_no as usize || latent_dim != ckpt.latent_dim as usize {
            return Err(ReplayError::Snapshot(format!(
                "header says {} classes / latent {}, parameters say {class_no} / {latent_dim}",
                ckpt.class_no, ckpt.latent_dim
            )));
        }
        Ok(Self {
            tape,
            layout,
            class_no,
            latent_dim,
            increment,
            trained,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReplayError> {
        std::fs::write(path, self.to_checkpoint().to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReplayError> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
    }
}

/// Where a replay buffer came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub snapshot_increment: usize,
    pub snapshot_trained: bool,
    pub seed: u64,
}

/// Generated images with their (model-space) class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for &l in &self.labels {
            *out.entry(l).or_insert(0) += 1;
        }
        out
    }

    /// Writes `replay-images-idx3-ubyte` and `replay-labels-idx1-ubyte` into
    /// `dir`, mapping labels through `label_of`. Pixels are quantized to bytes.
    pub fn dump_idx(&self, dir: impl AsRef<Path>, label_of: impl Fn(usize) -> u32) -> Result<(), ReplayError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let labels: Vec<u32> = self.labels.iter().map(|&l| label_of(l)).collect();
        let side = (self.images.cols() as f64).sqrt().round() as usize;
        write_idx_pair(
            &dir.join("replay-images-idx3-ubyte"),
            &dir.join("replay-labels-idx1-ubyte"),
            &self.images,
            &labels,
            side,
        )?;
        Ok(())
    }
}

/// Decodes `count` prior samples `z ~ N(0, I)` per requested class.
///
/// Each class draws from its own stream `derive_seed(seed, class)`, so a
/// class's samples do not depend on which other classes were requested.
pub fn generate_replay(
    snapshot: &DecoderSnapshot,
    counts: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<ReplayBuffer, ReplayError> {
    if let Some(&class) = counts.keys().find(|&&c| c >= snapshot.class_no) {
        return Err(ReplayError::UnknownClass {
            class,
            class_no: snapshot.class_no,
        });
    }
    let mut parts = Vec::with_capacity(counts.len());
    let mut labels = Vec::with_capacity(counts.values().sum());
    for (&class, &count) in counts {
        let mut rng = seeded(derive_seed(seed, class as u64));
        let z = standard_normal(&mut rng, &[count, snapshot.latent_dim]);
        let cls = vec![class; count];
        parts.push(snapshot.decode(&z, &cls)?);
        labels.extend(cls);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let images = if refs.is_empty() {
        Tensor::zeros(&[0, snapshot.output_dim()])
    } else {
        Tensor::concat_rows(&refs)?
    };
    Ok(ReplayBuffer {
        images,
        labels,
        provenance: Provenance {
            snapshot_increment: snapshot.increment,
            snapshot_trained: snapshot.trained,
            seed,
        },
    })
}

/// Replay count for every learned class: the median of the incoming
/// per-class counts, averaging (rounded down) the middle pair when even.
pub fn balance_counts(
    learned: &[usize],
    new_counts: &BTreeMap<usize, usize>,
) -> Result<BTreeMap<usize, usize>, ReplayError> {
    if new_counts.is_empty() {
        return Err(ReplayError::EmptyNewData);
    }
    if let Some((&class, _)) = new_counts.iter().find(|(_, &n)| n == 0) {
        return Err(ReplayError::ZeroCount { class });
    }
    let mut sorted: Vec<usize> = new_counts.values().copied().collect();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        sorted[mid - 1] + (sorted[mid] - sorted[mid - 1]) / 2
    };
    Ok(learned.iter().map(|&c| (c, median)).collect())
}
