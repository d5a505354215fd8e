use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, DataSplits, LabeledDataset};
use crate::numkit::rng::{derive_seed, seeded};
use crate::numkit::Tensor;

const LOW: f64 = 0.2;
const HIGH: f64 = 0.8;

/// Gaussian blobs centred on corners of the `[0.2, 0.8]^dim` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_classes: 2,
            n_per_class: 500,
            dim: 16,
            spread: 0.1,
            seed: 0,
        }
    }
}

fn bits_needed(n_classes: usize) -> usize {
    (usize::BITS - (n_classes.max(2) - 1).leading_zeros()) as usize
}

/// Corner assigned to `class`: coordinate `j` is high iff bit `j mod b` of the
/// class id is set, with `b` the bits needed to number all classes.
pub fn toy_center(class: usize, n_classes: usize, dim: usize) -> Vec<f64> {
    let bits = bits_needed(n_classes);
    (0..dim)
        .map(|j| if (class >> (j % bits)) & 1 == 1 { HIGH } else { LOW })
        .collect()
}

/// Class-major samples `clip(center + spread·N(0, I), 0, 1)`.
pub fn make_toy_dataset(spec: &ToySpec) -> Result<LabeledDataset, DataError> {
    if spec.n_classes == 0 || spec.n_per_class == 0 || spec.dim == 0 {
        return Err(DataError::Toy("class count, per-class count and dim must be positive".into()));
    }
    if !(spec.spread.is_finite() && spec.spread >= 0.0) {
        return Err(DataError::Toy(format!("spread must be a non-negative number, got {}", spec.spread)));
    }
    if bits_needed(spec.n_classes) > spec.dim {
        return Err(DataError::Toy(format!(
            "{} classes need more distinct corners than a {}-dimensional grid has",
            spec.n_classes, spec.dim
        )));
    }
    let mut rng = seeded(spec.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n = spec.n_classes * spec.n_per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.n_classes {
        let center = toy_center(class, spec.n_classes, spec.dim);
        for _ in 0..spec.n_per_class {
            for &c in &center {
                let v: f64 = c + spec.spread * noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(class as u32);
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, spec.dim], data)?, labels)
}

/// Train split from `spec`, test split from an independent stream with
/// `test_per_class` samples per class.
pub fn make_toy_splits(spec: &ToySpec, test_per_class: usize) -> Result<DataSplits, DataError> {
    let train = make_toy_dataset(spec)?;
    let test = make_toy_dataset(&ToySpec {
        n_per_class: test_per_class,
        seed: derive_seed(spec.seed, 0x7E57),
        ..*spec
    })?;
    Ok(DataSplits { train, test })
}
