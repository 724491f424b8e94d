//! Datasets: loaders, synthetic generators, augmentation and batching.

mod augment;
mod cifar;
mod idx;
mod synthetic;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robustdistill_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, crop_at, hflip, AugmentConfig};
pub use cifar::load_cifar_binary;
pub use idx::{load_idx, write_idx, IdxEncoding};
pub use synthetic::{gen_synthetic, SyntheticConfig, SyntheticKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Labelled images with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    /// `images` is `[N, ...sample shape]`; the leading axis must match `labels`.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.ndim() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Parameter(format!("num_classes must be >= 2, got {num_classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Parameter(format!("label {bad} out of range for {num_classes} classes")));
        }
        if let Some(bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape, without the batch axis.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images and labels of the given rows, in order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let x = self.images.select_rows(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// The first `n` examples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded holdout: returns `(train, validation)` with
    /// `round(fraction * N)` validation examples.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Parameter(format!("validation fraction {fraction} not in [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (fraction * self.len() as f64).round() as usize;
        let (val, train) = order.split_at(n_val);
        let (mut val, mut train) = (val.to_vec(), train.to_vec());
        val.sort_unstable();
        train.sort_unstable();
        Ok((
            self.subset(&train).with_split(Split::Train),
            self.subset(&val).with_split(Split::Validation),
        ))
    }

    /// Row-wise concatenation of datasets with matching sample shapes.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("cannot concatenate zero datasets".into()))?;
        let images: Vec<Tensor<f32>> = parts.iter().map(|d| d.images.clone()).collect();
        let images = Tensor::concat_rows(&images)?;
        let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
        let num_classes = parts.iter().map(|d| d.num_classes).max().unwrap_or(first.num_classes);
        Dataset::new(images, labels, num_classes, first.split)
    }
}

/// A seeded permutation of `0..n` cut into batches of `batch_size`
/// (the last batch may be short). Every index appears exactly once.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// `0..n` in order, cut into batches.
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
