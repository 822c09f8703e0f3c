//! Experiment configuration: sectioned TOML with every default applied on
//! absent keys and unknown keys rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::PartitionSpec;
use crate::engine::Strategy;
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpSpec};
use crate::objective::VhlConfig;
use crate::virtual_data::VirtualSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

/// Data source: a seeded Gaussian mixture, or IDX image/label files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_dataset_kind")]
    pub kind: DatasetKind,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Training samples generated per class.
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_center_spread")]
    pub center_spread: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    /// IDX paths, required when kind = "idx".
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
}

fn default_dataset_kind() -> DatasetKind {
    DatasetKind::Synthetic
}
fn default_classes() -> usize {
    10
}
fn default_dim() -> usize {
    32
}
fn default_per_class() -> usize {
    500
}
fn default_test_per_class() -> usize {
    100
}
fn default_center_spread() -> f64 {
    5.0
}
fn default_noise_sigma() -> f64 {
    1.2
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: default_dataset_kind(),
            classes: default_classes(),
            dim: default_dim(),
            per_class: default_per_class(),
            test_per_class: default_test_per_class(),
            center_spread: default_center_spread(),
            noise_sigma: default_noise_sigma(),
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature-extractor widths after the input layer.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: default_activation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Default depends on the client count; see resolved_clients_per_round.
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_natural: usize,
    #[serde(default = "default_batch")]
    pub batch_virtual: usize,
    #[serde(default = "default_fedprox_mu")]
    pub fedprox_mu: f64,
}

fn default_strategy() -> Strategy {
    Strategy::Fedavg
}
fn default_epochs() -> usize {
    1
}
fn default_base_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_lr_decay() -> f64 {
    0.992
}
fn default_batch() -> usize {
    128
}
fn default_fedprox_mu() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Metrics csv destination; "metrics.csv" when absent.
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    /// First round whose accuracy reaches this counts as the target round;
    /// absent means the caller supplies a baseline-derived target.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub model: ModelConfig,
    pub fl: FlConfig,
    #[serde(default)]
    pub vhl: VhlConfig,
    #[serde(rename = "virtual", default)]
    pub virtual_data: VirtualSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synthetic => {
                if d.classes == 0 || d.dim == 0 || d.per_class == 0 || d.test_per_class == 0 {
                    return Err(Error::Config("dataset counts must be positive".into()));
                }
                if !(d.center_spread > 0.0) || !(d.noise_sigma >= 0.0) {
                    return Err(Error::Config(
                        "dataset.center_spread must be > 0 and noise_sigma >= 0".into(),
                    ));
                }
            }
            DatasetKind::Idx => {
                for (field, value) in [
                    ("dataset.images", &d.images),
                    ("dataset.labels", &d.labels),
                    ("dataset.test_images", &d.test_images),
                    ("dataset.test_labels", &d.test_labels),
                ] {
                    if value.is_none() {
                        return Err(Error::Config(format!("{field} is required for kind = \"idx\"")));
                    }
                }
            }
        }

        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden needs positive widths".into()));
        }

        let fl = &self.fl;
        if fl.epochs == 0 {
            return Err(Error::Config("fl.epochs must be at least 1".into()));
        }
        if fl.batch_natural == 0 {
            return Err(Error::Config("fl.batch_natural must be at least 1".into()));
        }
        if !(fl.base_lr > 0.0) {
            return Err(Error::Config("fl.base_lr must be positive".into()));
        }
        if !(fl.lr_decay > 0.0 && fl.lr_decay <= 1.0) {
            return Err(Error::Config("fl.lr_decay must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&fl.momentum) {
            return Err(Error::Config("fl.momentum must be in [0, 1)".into()));
        }
        if !(fl.weight_decay >= 0.0) || !(fl.fedprox_mu >= 0.0) {
            return Err(Error::Config(
                "fl.weight_decay and fl.fedprox_mu must be non-negative".into(),
            ));
        }
        if self.partition.clients == 0 {
            return Err(Error::Config("partition.clients must be at least 1".into()));
        }
        if let Some(m) = fl.clients_per_round {
            if m == 0 || m > self.partition.clients {
                return Err(Error::Config(format!(
                    "fl.clients_per_round must be in 1..={}, got {m}",
                    self.partition.clients
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.vhl.validate()?;
        Ok(())
    }

    /// Participation rule when fl.clients_per_round is absent: 5 of 10,
    /// 10 of 100, otherwise half rounded down (at least 1).
    pub fn resolved_clients_per_round(&self) -> usize {
        if let Some(m) = self.fl.clients_per_round {
            return m;
        }
        match self.partition.clients {
            10 => 5,
            100 => 10,
            k => (k / 2).max(1),
        }
    }

    pub fn mlp_spec(&self, input_dim: usize, natural_classes: usize) -> Result<MlpSpec> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(&self.model.hidden);
        let virtual_classes = match self.vhl.mode {
            crate::objective::VhlMode::Full | crate::objective::VhlMode::Naive => {
                self.virtual_data.classes
            }
            _ => 0,
        };
        MlpSpec::new(widths, natural_classes, virtual_classes, self.model.activation)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output
            .metrics
            .clone()
            .unwrap_or_else(|| PathBuf::from("metrics.csv"))
    }
}
