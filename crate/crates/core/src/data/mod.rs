//! Datasets and seeded batch iteration.
//!
//! Images are stored as `[N, C, H, W]` tensors with values in `[0, 1]`;
//! vector datasets use `[N, D]`. Normalization treats dimension 1 as the
//! channel axis in both cases.

mod augment;
mod cifar;
mod synthetic;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use thiserror::Error;

pub use augment::{augment, hflip_image, reflect_crop, Augmentation, CROP_PAD};
pub use cifar::{load_cifar, parse_cifar, write_cifar, CifarVariant, IMAGE_BYTES};
pub use synthetic::{synthetic_blobs, SampleShape, SyntheticSpec};

use crate::rng::{self, Purpose};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: expected {expected} bytes, found {actual}")]
    Size {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: corrupt record at byte offset {offset}: {reason}")]
    Corrupt {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("label {label} at sample {index} is not below {classes}")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        if images.shape().first() != Some(&labels.len()) {
            return Err(DataError::Invalid(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if images.shape().len() < 2 {
            return Err(DataError::Invalid("samples need at least one dimension".into()));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::Label {
                index,
                label,
                classes,
            });
        }
        if images.shape().len() == 4 && images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, e.g. `[3, 32, 32]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn is_image(&self) -> bool {
        self.sample_shape().len() == 3
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Copies the given samples into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(shape, data), labels)
    }
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Channel means and population standard deviations of `ds`. A constant
    /// channel gets std 1 so it maps to zero instead of dividing by zero.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let shape = ds.images.shape();
        let channels = shape[1];
        let plane: usize = shape[2..].iter().product();
        let mut sum = vec![0.0; channels];
        let mut count = 0usize;
        for sample in ds.images.data().chunks(channels * plane) {
            for (c, chunk) in sample.chunks(plane).enumerate() {
                sum[c] += chunk.iter().sum::<f64>();
            }
            count += plane;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; channels];
        for sample in ds.images.data().chunks(channels * plane) {
            for (c, chunk) in sample.chunks(plane).enumerate() {
                sq[c] += chunk.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &mut Tensor) {
        let channels = self.mean.len();
        let plane: usize = x.shape()[2..].iter().product();
        for sample in x.data_mut().chunks_mut(channels * plane) {
            for (c, chunk) in sample.chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
    }
}

/// How one pass over a dataset is cut into batches.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
    pub augmentation: Augmentation,
    pub normalization: Option<Normalization>,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        Self {
            batch_size,
            seed,
            drop_last: false,
            augmentation: Augmentation::default(),
            normalization: None,
        }
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Batches for one epoch.
///
/// The training split is shuffled with a permutation drawn from
/// `(plan.seed, epoch)` and augmented before normalization; the test split
/// keeps dataset order and is only normalized.
pub fn iterate_epoch<'a>(
    ds: &'a Dataset,
    plan: &'a BatchPlan,
    epoch: usize,
) -> impl Iterator<Item = Batch> + 'a {
    assert!(plan.batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let train = ds.split == Split::Train;
    if train {
        order.shuffle(&mut rng::stream(plan.seed, Purpose::Shuffle, epoch as u64));
    }
    let mut aug_rng = rng::stream(plan.seed, Purpose::Augment, epoch as u64);
    let batches = plan.batches_per_epoch(ds.len());
    (0..batches).map(move |b| {
        let end = ((b + 1) * plan.batch_size).min(order.len());
        let indices = order[b * plan.batch_size..end].to_vec();
        let (mut x, labels) = ds.gather(&indices);
        if train && ds.is_image() && plan.augmentation.any() {
            x = augment(&x, plan.augmentation, &mut aug_rng);
        }
        if let Some(norm) = &plan.normalization {
            norm.apply(&mut x);
        }
        Batch { x, labels, indices }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize) -> Dataset {
        synthetic_blobs(
            &SyntheticSpec {
                n_per_class: n,
                classes: 3,
                shape: SampleShape::Vector(4),
                spread: 0.5,
                seed: 1,
            },
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn batch_sizes_cover_remainder() {
        let ds = blobs(200);
        let plan = BatchPlan::new(128, 0);
        let sizes: Vec<usize> = iterate_epoch(&ds, &plan, 0).map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![128, 128, 128, 128, 88]);
    }

    #[test]
    fn every_sample_once_and_reproducible() {
        let ds = blobs(50);
        let plan = BatchPlan::new(32, 4);
        let mut seen: Vec<usize> = iterate_epoch(&ds, &plan, 2).flat_map(|b| b.indices).collect();
        let again: Vec<usize> = iterate_epoch(&ds, &plan, 2).flat_map(|b| b.indices).collect();
        let other: Vec<usize> = iterate_epoch(&ds, &plan, 3).flat_map(|b| b.indices).collect();
        assert_eq!(seen, again);
        assert_ne!(seen, other);
        seen.sort_unstable();
        assert_eq!(seen, (0..150).collect::<Vec<_>>());
    }

    #[test]
    fn identical_streams_without_augmentation() {
        let ds = blobs(30);
        let plan = BatchPlan::new(16, 9);
        let a: Vec<Batch> = iterate_epoch(&ds, &plan, 0).collect();
        let b: Vec<Batch> = iterate_epoch(&ds, &plan, 0).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn normalization_standardises_training_split() {
        let ds = synthetic_blobs(
            &SyntheticSpec {
                n_per_class: 20,
                classes: 3,
                shape: SampleShape::Image {
                    channels: 3,
                    height: 8,
                    width: 8,
                },
                spread: 0.2,
                seed: 3,
            },
            Split::Train,
        )
        .unwrap();
        let norm = Normalization::from_dataset(&ds);
        let mut x = ds.images().clone();
        norm.apply(&mut x);
        let plane = 64;
        for c in 0..3 {
            let vals: Vec<f64> = x
                .data()
                .chunks(3 * plane)
                .flat_map(|s| s[c * plane..(c + 1) * plane].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn labels_must_be_in_range() {
        let images = Tensor::zeros(vec![2, 3]);
        assert!(matches!(
            Dataset::new(images, vec![0, 5], 3, Split::Train),
            Err(DataError::Label { index: 1, .. })
        ));
    }
}
