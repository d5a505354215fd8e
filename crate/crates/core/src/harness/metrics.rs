use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::LabeledDataset;
use crate::model::{ClareModel, ModelError};
use crate::numkit::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate on an empty test set")]
    EmptyTestSet,
    #[error("{predicted} predictions for {actual} labels")]
    Length { predicted: usize, actual: usize },
    #[error("average over k = 0 tasks")]
    ZeroTasks,
    #[error("average over {k} tasks requested but only {available} records exist")]
    TooFewRecords { k: usize, available: usize },
    #[error("model predicts class index {index} but only {known} class ids are mapped")]
    UnmappedIndex { index: usize, known: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: u32,
    pub accuracy: f64,
    pub samples: usize,
}

/// Accuracies in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassAccuracy>,
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let cols = scores.cols();
    (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for j in 1..cols {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Overall and per-class accuracy of `predicted` against `actual`.
pub fn score(predicted: &[u32], actual: &[u32]) -> Result<Evaluation, EvalError> {
    if actual.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if predicted.len() != actual.len() {
        return Err(EvalError::Length {
            predicted: predicted.len(),
            actual: actual.len(),
        });
    }
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&p, &a) in predicted.iter().zip(actual) {
        let t = tally.entry(a).or_default();
        t.0 += usize::from(p == a);
        t.1 += 1;
    }
    let correct = tally.values().map(|t| t.0).sum();
    let per_class = tally
        .into_iter()
        .map(|(class, (c, n))| ClassAccuracy {
            class,
            accuracy: 100.0 * c as f64 / n as f64,
            samples: n,
        })
        .collect();
    Ok(Evaluation {
        overall: 100.0 * correct as f64 / actual.len() as f64,
        correct,
        total: actual.len(),
        per_class,
    })
}

/// Classifies `test` and scores it; `class_ids[i]` is the dataset label of
/// model output `i`.
pub fn evaluate(model: &ClareModel, test: &LabeledDataset, class_ids: &[u32]) -> Result<Evaluation, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let probs = model.classify(test.images())?;
    let predicted = argmax_rows(&probs)
        .into_iter()
        .map(|i| {
            class_ids.get(i).copied().ok_or(EvalError::UnmappedIndex {
                index: i,
                known: class_ids.len(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    score(&predicted, test.labels())
}

/// Mean of the first `k` overall accuracies.
pub fn average_over_tasks(overall: &[f64], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroTasks);
    }
    if k > overall.len() {
        return Err(EvalError::TooFewRecords {
            k,
            available: overall.len(),
        });
    }
    Ok(overall[..k].iter().sum::<f64>() / k as f64)
}
