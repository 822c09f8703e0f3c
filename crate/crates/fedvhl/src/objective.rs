//! The VHL local objective: natural cross-entropy plus virtual cross-entropy
//! plus a lambda-weighted conditional feature-calibration penalty, with the
//! naive (no penalty) and VFA (direct feature sampling) ablations.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward, cross_entropy, forward, supcon_loss, Gradient, MlpSpec, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VhlMode {
    Full,
    Naive,
    Vfa,
    Off,
}

impl VhlMode {
    pub fn name(self) -> &'static str {
        match self {
            VhlMode::Full => "full",
            VhlMode::Naive => "naive",
            VhlMode::Vfa => "vfa",
            VhlMode::Off => "off",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeWeighting {
    /// One mean over the concatenated natural+virtual batch.
    JointMean,
    /// Separate means per part, summed.
    SeparateMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VhlConfig {
    #[serde(default = "default_mode")]
    pub mode: VhlMode,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Trace layer index the penalty reads; None means the deepest
    /// pre-classifier layer.
    #[serde(default)]
    pub calibration_layer: Option<usize>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_detach")]
    pub detach_virtual: bool,
    #[serde(default = "default_weighting")]
    pub ce_weighting: CeWeighting,
}

fn default_mode() -> VhlMode {
    VhlMode::Off
}
fn default_lambda() -> f64 {
    1.0
}
fn default_temperature() -> f64 {
    0.07
}
fn default_detach() -> bool {
    true
}
fn default_weighting() -> CeWeighting {
    CeWeighting::JointMean
}

impl Default for VhlConfig {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            lambda: default_lambda(),
            calibration_layer: None,
            temperature: default_temperature(),
            detach_virtual: default_detach(),
            ce_weighting: default_weighting(),
        }
    }
}

impl VhlConfig {
    pub fn resolve_layer(&self, spec: &MlpSpec) -> Result<usize> {
        let layer = self.calibration_layer.unwrap_or(spec.default_calibration_layer());
        if layer == 0 || layer > spec.feature_layer_count() {
            return Err(Error::Config(format!(
                "calibration_layer {layer} out of range 1..={}",
                spec.feature_layer_count()
            )));
        }
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("vhl.lambda must be >= 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("vhl.temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step reporting: the loss terms and whether label alignment between
/// the natural and virtual sides existed for the penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub ce_natural: f64,
    pub ce_virtual: f64,
    pub penalty: f64,
    pub alignment_missing: bool,
}

/// Supervised-contrastive alignment of natural features to same-class
/// virtual features; the virtual rows are always treated as constants.
///
/// Returns zero with `has_alignment = false` when no natural label appears
/// among the virtual labels, since then there is nothing to align to.
pub struct CalibrationPenalty {
    pub value: f64,
    pub natural_grad: Array2<f64>,
    pub has_alignment: bool,
}

pub fn calibration_penalty(
    natural_features: ArrayView2<f64>,
    natural_labels: &[usize],
    virtual_features: ArrayView2<f64>,
    virtual_labels: &[usize],
    temperature: f64,
) -> Result<CalibrationPenalty> {
    let (n_d, dim) = natural_features.dim();
    let n_v = virtual_features.nrows();
    if n_d == 0 || n_v == 0 {
        return Err(Error::Config("calibration needs natural and virtual rows".into()));
    }
    if virtual_features.ncols() != dim {
        return Err(Error::ShapeMismatch {
            site: "calibration features".into(),
            expected: format!("{dim} columns"),
            actual: format!("{}", virtual_features.ncols()),
        });
    }
    let aligned = natural_labels
        .iter()
        .any(|y| virtual_labels.contains(y));
    if !aligned {
        return Ok(CalibrationPenalty {
            value: 0.0,
            natural_grad: Array2::zeros((n_d, dim)),
            has_alignment: false,
        });
    }

    let mut joint = Array2::zeros((n_d + n_v, dim));
    joint.slice_mut(s![..n_d, ..]).assign(&natural_features);
    joint.slice_mut(s![n_d.., ..]).assign(&virtual_features);
    let mut labels = Vec::with_capacity(n_d + n_v);
    labels.extend_from_slice(natural_labels);
    labels.extend_from_slice(virtual_labels);
    let mut frozen = vec![false; n_d];
    frozen.extend(std::iter::repeat(true).take(n_v));

    let (value, grad) = supcon_loss(joint.view(), &labels, temperature, &frozen)?;
    Ok(CalibrationPenalty {
        value,
        natural_grad: grad.slice(s![..n_d, ..]).to_owned(),
        has_alignment: true,
    })
}

fn check_labels(labels: &[usize], bound: usize, what: &str) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= bound) {
        return Err(Error::InvalidInput(format!(
            "{what} label {bad} out of range for {bound} classes"
        )));
    }
    Ok(())
}

/// One training step's loss and parameter gradient under the configured
/// objective. `virtual_x` holds network inputs in full/naive mode and
/// calibration-layer features in vfa mode; it must be empty in off mode.
pub fn vhl_step_loss(
    spec: &MlpSpec,
    params: &ModelParams,
    natural_x: ArrayView2<f64>,
    natural_y: &[usize],
    virtual_x: ArrayView2<f64>,
    virtual_y: &[usize],
    config: &VhlConfig,
) -> Result<(f64, Gradient, StepDiagnostics)> {
    config.validate()?;
    let n_d = natural_x.nrows();
    let n_v = virtual_x.nrows();
    if n_d == 0 || natural_y.len() != n_d || virtual_y.len() != n_v {
        return Err(Error::Config("batch rows and label counts must line up".into()));
    }
    check_labels(natural_y, spec.natural_classes, "natural")?;

    match config.mode {
        VhlMode::Off => {
            if n_v != 0 {
                return Err(Error::Config("off mode must not receive virtual samples".into()));
            }
            let trace = forward(spec, params, natural_x)?;
            let (ce, lg) = cross_entropy(trace.logits.view(), natural_y)?;
            let grad = backward(spec, params, &trace, lg.view(), None)?;
            Ok((
                ce,
                grad,
                StepDiagnostics {
                    ce_natural: ce,
                    ce_virtual: 0.0,
                    penalty: 0.0,
                    alignment_missing: false,
                },
            ))
        }
        VhlMode::Vfa => {
            let layer = config.resolve_layer(spec)?;
            if n_v == 0 {
                return Err(Error::Config("vfa mode needs virtual feature rows".into()));
            }
            // VFA labels live directly in the natural class space.
            check_labels(virtual_y, spec.natural_classes, "virtual")?;
            let width = spec.layer_width(layer).unwrap();
            if virtual_x.ncols() != width {
                return Err(Error::ShapeMismatch {
                    site: "vfa virtual features".into(),
                    expected: format!("{width} columns for layer {layer}"),
                    actual: format!("{}", virtual_x.ncols()),
                });
            }
            let trace = forward(spec, params, natural_x)?;
            let (ce, lg) = cross_entropy(trace.logits.view(), natural_y)?;
            let pen = calibration_penalty(
                trace.features(layer).view(),
                natural_y,
                virtual_x,
                virtual_y,
                config.temperature,
            )?;
            let grad = if config.lambda == 0.0 || !pen.has_alignment {
                backward(spec, params, &trace, lg.view(), None)?
            } else {
                let mut fg = pen.natural_grad.clone();
                fg.mapv_inplace(|v| v * config.lambda);
                backward(spec, params, &trace, lg.view(), Some((layer, fg.view())))?
            };
            Ok((
                ce + config.lambda * pen.value,
                grad,
                StepDiagnostics {
                    ce_natural: ce,
                    ce_virtual: 0.0,
                    penalty: pen.value,
                    alignment_missing: !pen.has_alignment,
                },
            ))
        }
        VhlMode::Full | VhlMode::Naive => {
            if n_v == 0 {
                return Err(Error::Config(format!(
                    "{:?} mode needs virtual samples",
                    config.mode
                )));
            }
            if virtual_x.ncols() != spec.input_dim() {
                return Err(Error::ShapeMismatch {
                    site: "virtual batch".into(),
                    expected: format!("{} columns", spec.input_dim()),
                    actual: format!("{}", virtual_x.ncols()),
                });
            }
            if spec.virtual_classes == 0 {
                return Err(Error::Config(
                    "model has no virtual classifier outputs; set virtual classes".into(),
                ));
            }
            check_labels(virtual_y, spec.virtual_classes, "virtual")?;

            let mut joint = Array2::zeros((n_d + n_v, spec.input_dim()));
            joint.slice_mut(s![..n_d, ..]).assign(&natural_x);
            joint.slice_mut(s![n_d.., ..]).assign(&virtual_x);
            let trace = forward(spec, params, joint.view())?;

            let offset_virtual: Vec<usize> =
                virtual_y.iter().map(|&j| spec.natural_classes + j).collect();
            let (ce_nat, g_nat) =
                cross_entropy(trace.logits.slice(s![..n_d, ..]), natural_y)?;
            let (ce_virt, g_virt) =
                cross_entropy(trace.logits.slice(s![n_d.., ..]), &offset_virtual)?;

            let total = (n_d + n_v) as f64;
            let (ce_loss, scale_nat, scale_virt) = match config.ce_weighting {
                CeWeighting::JointMean => (
                    (n_d as f64 * ce_nat + n_v as f64 * ce_virt) / total,
                    n_d as f64 / total,
                    n_v as f64 / total,
                ),
                CeWeighting::SeparateMean => (ce_nat + ce_virt, 1.0, 1.0),
            };
            let mut logits_grad = Array2::zeros((n_d + n_v, spec.head_width()));
            logits_grad
                .slice_mut(s![..n_d, ..])
                .assign(&(&g_nat * scale_nat));
            logits_grad
                .slice_mut(s![n_d.., ..])
                .assign(&(&g_virt * scale_virt));

            if config.mode == VhlMode::Naive {
                let grad = backward(spec, params, &trace, logits_grad.view(), None)?;
                return Ok((
                    ce_loss,
                    grad,
                    StepDiagnostics {
                        ce_natural: ce_nat,
                        ce_virtual: ce_virt,
                        penalty: 0.0,
                        alignment_missing: false,
                    },
                ));
            }

            let layer = config.resolve_layer(spec)?;
            let feats = trace.features(layer);
            let (pen_value, pen_grad, has_alignment) = if config.detach_virtual {
                let pen = calibration_penalty(
                    feats.slice(s![..n_d, ..]),
                    natural_y,
                    feats.slice(s![n_d.., ..]),
                    virtual_y,
                    config.temperature,
                )?;
                let mut full = Array2::zeros(feats.dim());
                full.slice_mut(s![..n_d, ..]).assign(&pen.natural_grad);
                (pen.value, full, pen.has_alignment)
            } else {
                // Undetached ablation: gradient flows into the virtual rows
                // of the joint forward as well.
                let mut labels = Vec::with_capacity(n_d + n_v);
                labels.extend_from_slice(natural_y);
                labels.extend_from_slice(virtual_y);
                let aligned = natural_y.iter().any(|y| virtual_y.contains(y));
                if aligned {
                    let (v, g) =
                        supcon_loss(feats.view(), &labels, config.temperature, &vec![false; n_d + n_v])?;
                    (v, g, true)
                } else {
                    (0.0, Array2::zeros(feats.dim()), false)
                }
            };

            let grad = if config.lambda == 0.0 || !has_alignment {
                backward(spec, params, &trace, logits_grad.view(), None)?
            } else {
                let mut fg = pen_grad;
                fg.mapv_inplace(|v| v * config.lambda);
                backward(spec, params, &trace, logits_grad.view(), Some((layer, fg.view())))?
            };
            Ok((
                ce_loss + config.lambda * pen_value,
                grad,
                StepDiagnostics {
                    ce_natural: ce_nat,
                    ce_virtual: ce_virt,
                    penalty: pen_value,
                    alignment_missing: !has_alignment,
                },
            ))
        }
    }
}

#[cfg(test)]
mod tests;
