//! Labeled datasets: IDX files and synthetic Gaussian blobs.

pub mod blobs;
pub mod idx;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use blobs::{make_blob_task, BlobSpec};
pub use idx::{load_idx, IdxDataset};

/// Feature matrix `[N, D]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledData {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Shape {
                layer: "dataset features".into(),
                expected: "[N, D]".into(),
                actual: format!("{:?}", features.shape()),
            });
        }
        if features.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Splits off the first `n` rows; the remainder becomes the second part.
    pub fn split_at(&self, n: usize) -> Result<(LabeledData, LabeledData)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {n} must lie strictly inside 0..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((
            LabeledData::new(
                self.features.select_rows(&head),
                self.labels[..n].to_vec(),
                self.num_classes,
            )?,
            LabeledData::new(
                self.features.select_rows(&tail),
                self.labels[n..].to_vec(),
                self.num_classes,
            )?,
        ))
    }
}
