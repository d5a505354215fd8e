//! Labeled image datasets: MNIST ingestion, class partitioning, toy blobs.

mod idx;
mod toy;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::numkit::{NumError, Tensor};

pub use idx::{maybe_gunzip, parse_idx, write_idx, IdxError, IdxHeader, TYPE_U8};
pub use toy::{make_toy_dataset, make_toy_splits, toy_center, ToySpec};

pub const MNIST_PIXELS: usize = 784;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("data file not found: {0} (also tried .gz)")]
    MissingFile(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },
    #[error("{path}: expected a rank-{expected} IDX array, got dims {dims:?}")]
    Rank {
        path: PathBuf,
        expected: usize,
        dims: Vec<usize>,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("pixel value {0} outside [0, 1]")]
    PixelRange(f64),
    #[error("unknown class id {0}")]
    UnknownClass(u32),
    #[error("invalid toy dataset parameters: {0}")]
    Toy(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Images in `[0, 1]` with integer class labels and a per-class row index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<u32>,
    index: BTreeMap<u32, Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<u32>) -> Result<Self, DataError> {
        images.dims2()?;
        if images.rows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::PixelRange(v));
        }
        let mut index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            index.entry(l).or_default().push(i);
        }
        Ok(Self { images, labels, index })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            images: Tensor::zeros(&[0, dim]),
            labels: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Class ids present, ascending.
    pub fn class_ids(&self) -> Vec<u32> {
        self.index.keys().copied().collect()
    }

    pub fn rows_of(&self, class: u32) -> &[usize] {
        self.index.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        self.index.iter().map(|(&c, rows)| (c, rows.len())).collect()
    }

    /// Rows whose label is in `class_ids`, original order preserved.
    pub fn subset_by_classes(&self, class_ids: &[u32]) -> Result<Self, DataError> {
        if let Some(&c) = class_ids.iter().find(|c| !self.index.contains_key(c)) {
            return Err(DataError::UnknownClass(c));
        }
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| class_ids.contains(&self.labels[i]))
            .collect();
        Ok(self.select_rows(&rows))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let images = self.images.gather_rows(rows);
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, labels).expect("row selection preserves invariants")
    }

    /// Per-pixel mean of one class.
    pub fn centroid(&self, class: u32) -> Option<Vec<f64>> {
        let rows = self.index.get(&class)?;
        let mut acc = vec![0.0; self.dim()];
        for &i in rows {
            for (a, v) in acc.iter_mut().zip(self.images.row(i)) {
                *a += v;
            }
        }
        let n = rows.len() as f64;
        Some(acc.into_iter().map(|v| v / n).collect())
    }

    /// Row-wise concatenation.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<Self, DataError> {
        let images: Vec<&Tensor> = parts.iter().map(|p| &p.images).collect();
        let images = Tensor::concat_rows(&images)?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Self::new(images, labels)
    }
}

/// Train and test splits of one dataset.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn locate(dir: &Path, name: &str) -> Result<PathBuf, DataError> {
    let plain = dir.join(name);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(DataError::MissingFile(plain))
}

fn read_idx_file(path: &Path, rank: usize) -> Result<(IdxHeader, Vec<u8>), DataError> {
    let raw = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let wrap = |source| DataError::Idx {
        path: path.to_path_buf(),
        source,
    };
    let bytes = maybe_gunzip(&raw).map_err(wrap)?;
    let (header, data) = parse_idx(&bytes).map_err(wrap)?;
    if header.rank() != rank {
        return Err(DataError::Rank {
            path: path.to_path_buf(),
            expected: rank,
            dims: header.dims,
        });
    }
    Ok((header, data))
}

/// Loads one images/labels pair, scaling pixels by 1/255.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<LabeledDataset, DataError> {
    let (ih, pixels) = read_idx_file(images, 3)?;
    let (_, label_bytes) = read_idx_file(labels, 1)?;
    let n = ih.dims[0];
    if n != label_bytes.len() {
        return Err(DataError::CountMismatch {
            images: n,
            labels: label_bytes.len(),
        });
    }
    let dim = ih.dims[1] * ih.dims[2];
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Tensor::new(vec![n, dim], data)?;
    LabeledDataset::new(images, label_bytes.into_iter().map(u32::from).collect())
}

/// Reads the four standard MNIST files (optionally gzipped) from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<DataSplits, DataError> {
    let dir = dir.as_ref();
    let paths = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
        .map(|name| locate(dir, name));
    let [ti, tl, ei, el] = paths;
    let train = load_idx_pair(&ti?, &tl?)?;
    let test = load_idx_pair(&ei?, &el?)?;
    Ok(DataSplits { train, test })
}

/// Quantizes images to bytes and writes an images/labels IDX pair.
pub fn write_idx_pair(images_path: &Path, labels_path: &Path, data: &Tensor, labels: &[u32], side: usize) -> std::io::Result<()> {
    let n = data.rows();
    let pixels: Vec<u8> = data.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let dims = if side * side == data.cols() {
        vec![n, side, side]
    } else {
        vec![n, 1, data.cols()]
    };
    std::fs::write(images_path, write_idx(&dims, &pixels))?;
    let label_bytes: Vec<u8> = labels.iter().map(|&l| l.min(255) as u8).collect();
    std::fs::write(labels_path, write_idx(&[n], &label_bytes))
}
