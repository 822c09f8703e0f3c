//! Dataset construction, Non-IID partitioning, IDX ingestion, and the mixed
//! natural/virtual batch sampler.

pub mod batch;
pub mod idx;
pub mod partition;

pub use batch::{mixed_batch_iter, MixedBatch, MixedBatchIter};
pub use partition::{PartitionScheme, PartitionSpec};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeding::{rng_for, Role};

/// Feature matrix plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidInput("dataset needs at least one sample".into()));
        }
        if labels.len() != features.nrows() {
            return Err(Error::ShapeMismatch {
                site: "dataset labels".into(),
                expected: format!("{} labels", features.nrows()),
                actual: format!("{}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("dataset features must be finite".into()));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Indices of all samples labeled `class`, in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Gather the feature rows at `indices`.
    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&self.features.row(i));
        }
        out
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// New dataset holding only the given rows (same class_count).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidInput(format!("subset index {bad} out of range")));
        }
        Self::new(self.rows(indices), self.labels_at(indices), self.class_count)
    }
}

/// One client's private partition: an index list into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub owner: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn n(&self) -> usize {
        self.indices.len()
    }
}

/// Seed-placed Gaussian points with pairwise distance at least `min_dist`.
///
/// Draws up to 1000 candidates per point and keeps the one farthest from the
/// already-accepted set if none clears the bound, so this never fails; the
/// bound is a best-effort separation certificate, checked by callers' tests.
pub(crate) fn draw_separated_centers<R: Rng>(
    count: usize,
    dim: usize,
    scale: f64,
    min_dist: f64,
    rng: &mut R,
) -> Array2<f64> {
    let mut centers = Array2::zeros((count, dim));
    for c in 0..count {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..1000 {
            let cand: Vec<f64> = (0..dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let nearest = (0..c)
                .map(|p| {
                    centers
                        .row(p)
                        .iter()
                        .zip(&cand)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            if best.as_ref().map_or(true, |(d, _)| nearest > *d) {
                best = Some((nearest, cand.clone()));
            }
            if nearest >= min_dist {
                break;
            }
        }
        let (_, point) = best.unwrap();
        for (k, v) in point.into_iter().enumerate() {
            centers[[c, k]] = v;
        }
    }
    centers
}

/// Isotropic Gaussian blobs around seed-placed class centers, grouped by
/// class in row order.
pub fn make_synthetic_mixture(
    class_count: usize,
    dim: usize,
    per_class: usize,
    center_spread: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count == 0 || dim == 0 || per_class == 0 {
        return Err(Error::InvalidInput("counts must be positive".into()));
    }
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(Error::InvalidInput("noise_sigma must be finite and >= 0".into()));
    }
    if center_spread <= 0.0 || !center_spread.is_finite() {
        return Err(Error::InvalidInput("center_spread must be finite and positive".into()));
    }
    let mut center_rng = rng_for(seed, Role::DatasetCenters, &[]);
    let centers = draw_separated_centers(class_count, dim, center_spread, center_spread, &mut center_rng);

    let mut noise_rng = rng_for(seed, Role::DatasetNoise, &[]);
    let n = class_count * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        for s in 0..per_class {
            let row = c * per_class + s;
            for k in 0..dim {
                let z: f64 = noise_rng.sample(StandardNormal);
                features[[row, k]] = centers[[c, k]] + noise_sigma * z;
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(features, labels, class_count)
}

/// Split a class-grouped dataset into train/test blocks of `train_per_class`
/// and `test_per_class` rows per class. Rows are i.i.d. within a class, so
/// block position carries no information.
pub fn split_train_test(
    dataset: &LabeledDataset,
    train_per_class: usize,
    test_per_class: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..dataset.class_count {
        let idx = dataset.class_indices(c);
        if idx.len() < train_per_class + test_per_class {
            return Err(Error::InvalidInput(format!(
                "class {c} has {} samples, need {}",
                idx.len(),
                train_per_class + test_per_class
            )));
        }
        train_idx.extend_from_slice(&idx[..train_per_class]);
        test_idx.extend_from_slice(&idx[train_per_class..train_per_class + test_per_class]);
    }
    Ok((dataset.subset(&train_idx)?, dataset.subset(&test_idx)?))
}

/// Nearest-class-mean accuracy, the separability certificate used by tests.
pub fn nearest_centroid_accuracy(dataset: &LabeledDataset) -> f64 {
    let mut means = Array2::zeros((dataset.class_count, dataset.dim()));
    let mut counts = vec![0usize; dataset.class_count];
    for (i, &l) in dataset.labels.iter().enumerate() {
        let mut row = means.row_mut(l);
        row += &dataset.features.row(i);
        counts[l] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let mut row = means.row_mut(c);
            row.mapv_inplace(|v| v / n as f64);
        }
    }
    let mut correct = 0usize;
    for (i, &l) in dataset.labels.iter().enumerate() {
        let x = dataset.features.row(i);
        let mut best = (f64::INFINITY, 0usize);
        for (c, m) in means.axis_iter(Axis(0)).enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let d: f64 = x.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        if best.1 == l {
            correct += 1;
        }
    }
    correct as f64 / dataset.len() as f64
}

#[cfg(test)]
mod tests;
