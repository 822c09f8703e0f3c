//! Shared virtual dataset: class-conditional Gaussian noise on a small base
//! grid, nearest-neighbor upsampled, one Gaussian per virtual class with a
//! distinct mean and a common standard deviation. Also the VFA variant that
//! samples directly in feature space, and a binary container so every
//! simulated client can provably load one artifact.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{draw_separated_centers, LabeledDataset};
use crate::error::{Error, Result};
use crate::seeding::{rng_for, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VirtualSpec {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_base_side")]
    pub base_side: usize,
    #[serde(default = "default_up_factor")]
    pub up_factor: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_mean_separation")]
    pub mean_separation: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    64
}
fn default_base_side() -> usize {
    8
}
fn default_up_factor() -> usize {
    4
}
fn default_channels() -> usize {
    1
}
fn default_mean_separation() -> f64 {
    10.0
}
fn default_sigma() -> f64 {
    1.0
}

impl Default for VirtualSpec {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            per_class: default_per_class(),
            base_side: default_base_side(),
            up_factor: default_up_factor(),
            channels: default_channels(),
            mean_separation: default_mean_separation(),
            sigma: default_sigma(),
        }
    }
}

impl VirtualSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 || self.base_side == 0 || self.channels == 0 {
            return Err(Error::InvalidInput("virtual spec counts must be positive".into()));
        }
        if self.up_factor == 0 {
            return Err(Error::InvalidInput("up_factor must be at least 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidInput("sigma must be positive".into()));
        }
        if !(self.mean_separation >= 0.0) {
            return Err(Error::InvalidInput("mean_separation must be non-negative".into()));
        }
        Ok(())
    }

    pub fn base_dim(&self) -> usize {
        self.base_side * self.base_side * self.channels
    }

    /// Sample dimension after upsampling.
    pub fn sample_dim(&self) -> usize {
        let side = self.base_side * self.up_factor;
        side * side * self.channels
    }
}

/// The shared virtual dataset plus generation provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualDataset {
    pub data: LabeledDataset,
    pub spec: Option<VirtualSpec>,
    /// True class means in sample space; None for datasets loaded from a
    /// container, where only the samples survive.
    pub class_means: Option<Array2<f64>>,
}

impl VirtualDataset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.data.class_count
    }
}

/// Replicate each base pixel into a factor x factor block, per channel.
///
/// `image` is channels rows of side*side row-major pixels.
pub fn upsample_nearest(image: ArrayView2<f64>, side: usize, factor: usize) -> Result<Array2<f64>> {
    if factor == 0 {
        return Err(Error::InvalidInput("upsample factor must be at least 1".into()));
    }
    let channels = image.nrows();
    if image.ncols() != side * side {
        return Err(Error::ShapeMismatch {
            site: "upsample_nearest".into(),
            expected: format!("{} pixels per channel", side * side),
            actual: format!("{}", image.ncols()),
        });
    }
    let out_side = side * factor;
    let mut out = Array2::zeros((channels, out_side * out_side));
    for ch in 0..channels {
        for r in 0..out_side {
            for c in 0..out_side {
                out[[ch, r * out_side + c]] = image[[ch, (r / factor) * side + c / factor]];
            }
        }
    }
    Ok(out)
}

/// Flatten channels x pixels into one row, channel-major.
fn write_row(features: &mut Array2<f64>, row: usize, image: &Array2<f64>) {
    let per_ch = image.ncols();
    for ch in 0..image.nrows() {
        for p in 0..per_ch {
            features[[row, ch * per_ch + p]] = image[[ch, p]];
        }
    }
}

/// Class-conditional noise: per class, a seed-placed mean on the base grid
/// and i.i.d. Gaussian pixels around it, then nearest-neighbor upsampling.
pub fn generate_noise_dataset(spec: &VirtualSpec, seed: u64) -> Result<VirtualDataset> {
    spec.validate()?;
    let base_dim = spec.base_dim();
    let mut mean_rng = rng_for(seed, Role::VirtualMeans, &[]);
    let means = draw_separated_centers(
        spec.classes,
        base_dim,
        spec.mean_separation.max(1.0),
        spec.mean_separation,
        &mut mean_rng,
    );

    let mut noise_rng = rng_for(seed, Role::VirtualNoise, &[]);
    let n = spec.classes * spec.per_class;
    let base_pixels = spec.base_side * spec.base_side;
    let mut features = Array2::zeros((n, spec.sample_dim()));
    let mut labels = Vec::with_capacity(n);
    let mut class_means = Array2::zeros((spec.classes, spec.sample_dim()));
    let mut base = Array2::zeros((spec.channels, base_pixels));
    for c in 0..spec.classes {
        for ch in 0..spec.channels {
            for p in 0..base_pixels {
                base[[ch, p]] = means[[c, ch * base_pixels + p]];
            }
        }
        let up_mean = upsample_nearest(base.view(), spec.base_side, spec.up_factor)?;
        write_row(&mut class_means, c, &up_mean);
        for s in 0..spec.per_class {
            for ch in 0..spec.channels {
                for p in 0..base_pixels {
                    let z: f64 = noise_rng.sample(StandardNormal);
                    base[[ch, p]] = means[[c, ch * base_pixels + p]] + spec.sigma * z;
                }
            }
            let up = upsample_nearest(base.view(), spec.base_side, spec.up_factor)?;
            write_row(&mut features, c * spec.per_class + s, &up);
            labels.push(c);
        }
    }
    Ok(VirtualDataset {
        data: LabeledDataset::new(features, labels, spec.classes)?,
        spec: Some(spec.clone()),
        class_means: Some(class_means),
    })
}

/// VFA variant: Gaussians sampled directly in the calibration feature space.
pub fn generate_vfa_features(
    classes: usize,
    feature_dim: usize,
    per_class: usize,
    mean_separation: f64,
    sigma: f64,
    seed: u64,
) -> Result<VirtualDataset> {
    if classes == 0 || feature_dim == 0 || per_class == 0 {
        return Err(Error::InvalidInput("counts must be positive".into()));
    }
    if !(sigma > 0.0) || !(mean_separation >= 0.0) {
        return Err(Error::InvalidInput("need sigma > 0 and mean_separation >= 0".into()));
    }
    let mut mean_rng = rng_for(seed, Role::VirtualMeans, &[1]);
    let means = draw_separated_centers(classes, feature_dim, mean_separation.max(1.0), mean_separation, &mut mean_rng);
    let mut noise_rng = rng_for(seed, Role::VirtualNoise, &[1]);
    let n = classes * per_class;
    let mut features = Array2::zeros((n, feature_dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for s in 0..per_class {
            let row = c * per_class + s;
            for k in 0..feature_dim {
                let z: f64 = noise_rng.sample(StandardNormal);
                features[[row, k]] = means[[c, k]] + sigma * z;
            }
            labels.push(c);
        }
    }
    Ok(VirtualDataset {
        data: LabeledDataset::new(features, labels, classes)?,
        spec: None,
        class_means: Some(means),
    })
}

/// Container layout: three little-endian u32 header words (classes,
/// per_class, dim), then row-major little-endian f32 features. Labels are
/// implicit: rows are grouped by class, per_class rows each.
pub fn encode_container(dataset: &VirtualDataset) -> Result<Vec<u8>> {
    let d = &dataset.data;
    let classes = d.class_count;
    if d.len() % classes != 0 {
        return Err(Error::InvalidInput("container needs equal per-class counts".into()));
    }
    let per_class = d.len() / classes;
    for (i, &l) in d.labels.iter().enumerate() {
        if l != i / per_class {
            return Err(Error::InvalidInput(
                "container rows must be grouped by class".into(),
            ));
        }
    }
    if classes > u32::MAX as usize || per_class > u32::MAX as usize || d.dim() > u32::MAX as usize {
        return Err(Error::InvalidInput("container dimension exceeds u32".into()));
    }
    let mut out = Vec::with_capacity(12 + d.len() * d.dim() * 4);
    out.extend_from_slice(&(classes as u32).to_le_bytes());
    out.extend_from_slice(&(per_class as u32).to_le_bytes());
    out.extend_from_slice(&(d.dim() as u32).to_le_bytes());
    for v in d.features.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<VirtualDataset> {
    let word = |off: usize| -> Result<u32> {
        if bytes.len() < off + 4 {
            return Err(Error::ContainerParse {
                offset: bytes.len(),
                reason: format!("truncated header: need {} bytes, have {}", off + 4, bytes.len()),
            });
        }
        Ok(u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
    };
    let classes = word(0)? as usize;
    let per_class = word(4)? as usize;
    let dim = word(8)? as usize;
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::ContainerParse {
            offset: 0,
            reason: format!("header counts must be positive, got {classes}/{per_class}/{dim}"),
        });
    }
    let values = classes
        .checked_mul(per_class)
        .and_then(|v| v.checked_mul(dim))
        .ok_or(Error::ContainerParse {
            offset: 0,
            reason: "header product overflows".into(),
        })?;
    let expected = 12 + values * 4;
    if bytes.len() != expected {
        return Err(Error::ContainerParse {
            offset: 12,
            reason: format!(
                "payload has {} bytes, expected {}",
                bytes.len().saturating_sub(12),
                expected - 12
            ),
        });
    }
    let n = classes * per_class;
    let mut features = Array2::zeros((n, dim));
    for i in 0..values {
        let off = 12 + i * 4;
        let v = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if !v.is_finite() {
            return Err(Error::ContainerParse {
                offset: off,
                reason: "non-finite feature value".into(),
            });
        }
        features[[i / dim, i % dim]] = v as f64;
    }
    let labels: Vec<usize> = (0..n).map(|i| i / per_class).collect();
    Ok(VirtualDataset {
        data: LabeledDataset::new(features, labels, classes)?,
        spec: None,
        class_means: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::nearest_centroid_accuracy;
    use ndarray::arr2;

    #[test]
    fn upsample_factor_one_is_identity() {
        let img = arr2(&[[1.0, 2.0, 3.0, 4.0]]);
        let out = upsample_nearest(img.view(), 2, 1).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn upsample_single_pixel_fills_block() {
        let img = arr2(&[[7.5]]);
        let out = upsample_nearest(img.view(), 1, 3).unwrap();
        assert_eq!(out.ncols(), 9);
        assert!(out.iter().all(|&v| v == 7.5));
    }

    #[test]
    fn upsample_two_by_two_blocks() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let img = arr2(&[[a, b, c, d]]);
        let out = upsample_nearest(img.view(), 2, 2).unwrap();
        let expect = [
            a, a, b, b, //
            a, a, b, b, //
            c, c, d, d, //
            c, c, d, d,
        ];
        for (k, &e) in expect.iter().enumerate() {
            assert_eq!(out[[0, k]], e, "pixel {k}");
        }
    }

    #[test]
    fn noise_dataset_matches_paper_grid() {
        let spec = VirtualSpec {
            classes: 3,
            per_class: 4,
            base_side: 8,
            up_factor: 4,
            channels: 1,
            ..VirtualSpec::default()
        };
        let vd = generate_noise_dataset(&spec, 1).unwrap();
        assert_eq!(vd.data.dim(), 32 * 32);
        assert_eq!(vd.len(), 12);
    }

    #[test]
    fn noise_dataset_sigma_limit_collapses_to_upsampled_means() {
        let spec = VirtualSpec {
            classes: 2,
            per_class: 3,
            base_side: 2,
            up_factor: 2,
            channels: 1,
            mean_separation: 5.0,
            sigma: 1e-12,
        };
        let vd = generate_noise_dataset(&spec, 9).unwrap();
        let means = vd.class_means.as_ref().unwrap();
        for (i, &label) in vd.data.labels.iter().enumerate() {
            for (a, m) in vd.data.features.row(i).iter().zip(means.row(label).iter()) {
                assert!((a - m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noise_dataset_is_deterministic_and_uniform() {
        let spec = VirtualSpec {
            classes: 4,
            per_class: 6,
            base_side: 2,
            up_factor: 1,
            channels: 2,
            ..VirtualSpec::default()
        };
        let a = generate_noise_dataset(&spec, 3).unwrap();
        let b = generate_noise_dataset(&spec, 3).unwrap();
        assert_eq!(a, b);
        for c in 0..4 {
            assert_eq!(a.data.class_indices(c).len(), 6);
        }
    }

    #[test]
    fn separability_certificate_at_default_separation() {
        for classes in [2usize, 10] {
            let spec = VirtualSpec {
                classes,
                per_class: 16,
                base_side: 4,
                up_factor: 2,
                channels: 1,
                mean_separation: 10.0,
                sigma: 1.0,
            };
            let vd = generate_noise_dataset(&spec, 5).unwrap();
            assert_eq!(nearest_centroid_accuracy(&vd.data), 1.0, "classes={classes}");
        }
    }

    #[test]
    fn vfa_empirical_means_near_true_means() {
        let vd = generate_vfa_features(10, 64, 256, 10.0, 1.0, 2).unwrap();
        assert_eq!(vd.data.features.dim(), (2560, 64));
        assert_eq!(vd, generate_vfa_features(10, 64, 256, 10.0, 1.0, 2).unwrap());

        let means = vd.class_means.as_ref().unwrap();
        let tol = 4.0 / (256f64).sqrt();
        for c in 0..10 {
            let idx = vd.data.class_indices(c);
            for k in 0..64 {
                let emp: f64 = idx.iter().map(|&i| vd.data.features[[i, k]]).sum::<f64>() / 256.0;
                assert!(
                    (emp - means[[c, k]]).abs() < tol,
                    "class {c} dim {k}: |{emp} - {}| >= {tol}",
                    means[[c, k]]
                );
            }
        }
    }

    #[test]
    fn container_round_trips() {
        let spec = VirtualSpec {
            classes: 3,
            per_class: 5,
            base_side: 2,
            up_factor: 2,
            channels: 1,
            ..VirtualSpec::default()
        };
        let vd = generate_noise_dataset(&spec, 8).unwrap();
        let bytes = encode_container(&vd).unwrap();
        assert_eq!(bytes.len(), 12 + 15 * 16 * 4);
        let back = decode_container(&bytes).unwrap();
        assert_eq!(back.data.labels, vd.data.labels);
        assert_eq!(back.data.class_count, 3);
        for (a, b) in back.data.features.iter().zip(vd.data.features.iter()) {
            // f32 storage rounds; accept single-precision error.
            assert!((a - b).abs() <= (b.abs() + 1.0) * 1e-6);
        }
        // Re-encoding the decoded dataset reproduces the bytes.
        assert_eq!(encode_container(&back).unwrap(), bytes);
    }

    #[test]
    fn container_rejects_malformed_input() {
        assert!(matches!(
            decode_container(&[1, 0, 0]),
            Err(Error::ContainerParse { offset: 3, .. })
        ));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        // One row short.
        assert!(matches!(
            decode_container(&bytes),
            Err(Error::ContainerParse { offset: 12, .. })
        ));
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_container(&bytes),
            Err(Error::ContainerParse { offset: 16, .. })
        ));
    }
}
