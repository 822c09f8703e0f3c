//! Seeded experiment pipeline: config to dataset to partition to virtual
//! data to round loop to metrics csv, plus the randomized theory suite and
//! feature dumps. Each seed's pipeline is independent; seeds may run on a
//! thread pool and their metrics are concatenated in seed order, so output
//! bytes never depend on the worker count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::analysis::{export_features, random_theory_instance, FeatureGroup};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::idx::{dataset_from_idx, parse_idx};
use crate::data::{make_synthetic_mixture, split_train_test, ClientShard, LabeledDataset};
use crate::engine::{run_round, LocalConfig, ServerState};
use crate::error::{Error, Result};
use crate::nn::{MlpSpec, ModelParams};
use crate::objective::VhlMode;
use crate::seeding::{rng_for, Role};
use crate::virtual_data::{generate_noise_dataset, generate_vfa_features};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub round: usize,
    pub strategy: &'static str,
    pub mode: &'static str,
    pub accuracy: f64,
    pub train_loss: f64,
    pub client_drift: f64,
    pub calibration_penalty: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "seed,round,strategy,mode,accuracy,train_loss,client_drift,calibration_penalty,lr";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.seed,
            self.round,
            self.strategy,
            self.mode,
            self.accuracy,
            self.train_loss,
            self.client_drift,
            self.calibration_penalty,
            self.lr
        )
    }
}

/// Everything one seed's round loop needs, fully materialized.
pub struct World {
    pub spec: MlpSpec,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub shards: Vec<ClientShard>,
    pub virtual_data: Option<LabeledDataset>,
    pub state: ServerState,
}

fn load_idx_dataset(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images)?;
    let label_bytes = fs::read(labels)?;
    dataset_from_idx(&parse_idx(&image_bytes)?, &parse_idx(&label_bytes)?)
}

pub fn local_config(config: &ExperimentConfig) -> LocalConfig {
    LocalConfig {
        epochs: config.fl.epochs,
        b_d: config.fl.batch_natural,
        b_v: config.fl.batch_virtual,
        base_lr: config.fl.base_lr,
        lr_decay: config.fl.lr_decay,
        momentum: config.fl.momentum,
        weight_decay: config.fl.weight_decay,
        fedprox_mu: config.fl.fedprox_mu,
        vhl: config.vhl.clone(),
    }
}

/// Builds the per-seed world: data, shards, virtual data matched to the vhl
/// mode, and a freshly initialized server.
pub fn build_world(config: &ExperimentConfig, seed: u64) -> Result<World> {
    let (train, test) = match config.dataset.kind {
        DatasetKind::Synthetic => {
            let d = &config.dataset;
            let full = make_synthetic_mixture(
                d.classes,
                d.dim,
                d.per_class + d.test_per_class,
                d.center_spread,
                d.noise_sigma,
                seed,
            )?;
            split_train_test(&full, d.per_class, d.test_per_class)?
        }
        DatasetKind::Idx => {
            let d = &config.dataset;
            let train = load_idx_dataset(
                d.images.as_deref().expect("validated"),
                d.labels.as_deref().expect("validated"),
            )?;
            let test = load_idx_dataset(
                d.test_images.as_deref().expect("validated"),
                d.test_labels.as_deref().expect("validated"),
            )?;
            if train.class_count != test.class_count || train.dim() != test.dim() {
                return Err(Error::Config(
                    "idx train and test sets disagree on classes or dimensions".into(),
                ));
            }
            (train, test)
        }
    };

    let shards = config.partition.partition(&train, seed)?;
    let spec = config.mlp_spec(train.dim(), train.class_count)?;

    let virtual_data = match config.vhl.mode {
        VhlMode::Off => None,
        VhlMode::Full | VhlMode::Naive => {
            let v = &config.virtual_data;
            if v.classes != train.class_count {
                return Err(Error::Config(format!(
                    "virtual.classes = {} must match the {} natural classes",
                    v.classes, train.class_count
                )));
            }
            if v.sample_dim() != train.dim() {
                return Err(Error::Config(format!(
                    "virtual sample dim {} must match the input dim {}",
                    v.sample_dim(),
                    train.dim()
                )));
            }
            Some(generate_noise_dataset(v, seed)?.data)
        }
        VhlMode::Vfa => {
            let v = &config.virtual_data;
            if v.classes != train.class_count {
                return Err(Error::Config(format!(
                    "virtual.classes = {} must match the {} natural classes",
                    v.classes, train.class_count
                )));
            }
            let layer = config.vhl.resolve_layer(&spec)?;
            let width = spec.layer_width(layer).expect("resolved layer");
            Some(
                generate_vfa_features(
                    v.classes,
                    width,
                    v.per_class,
                    v.mean_separation,
                    v.sigma,
                    seed,
                )?
                .data,
            )
        }
    };

    let mut init_rng = rng_for(seed, Role::ModelInit, &[]);
    let init = ModelParams::init(&spec, &mut init_rng);
    let state = ServerState::new(&spec, config.fl.strategy, seed, shards.len(), init);

    Ok(World {
        spec,
        train,
        test,
        shards,
        virtual_data,
        state,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_accuracy: f64,
    pub best_round: usize,
    /// First round whose accuracy reached the target, when one was set.
    pub target_round: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub seeds: Vec<SeedSummary>,
    pub mean_best_accuracy: f64,
    pub target_accuracy: Option<f64>,
    pub metrics_path: PathBuf,
}

struct SeedOutcome {
    rows: Vec<MetricsRow>,
    summary: Option<SeedSummary>,
    error: Option<Error>,
}

fn run_seed(config: &ExperimentConfig, seed: u64) -> SeedOutcome {
    let mut rows = Vec::with_capacity(config.fl.rounds);
    let build = || -> Result<World> { build_world(config, seed) };
    let mut world = match build() {
        Ok(w) => w,
        Err(e) => {
            return SeedOutcome {
                rows,
                summary: None,
                error: Some(e),
            }
        }
    };
    let lc = local_config(config);
    let per_round = config.resolved_clients_per_round();
    let strategy = config.fl.strategy.name();
    let mode = config.vhl.mode.name();

    let mut best = (0.0f64, 0usize);
    let mut target_round = None;
    for _ in 0..config.fl.rounds {
        let metrics = match run_round(
            &mut world.state,
            &world.spec,
            &world.train,
            &world.shards,
            world.virtual_data.as_ref(),
            &world.test,
            per_round,
            &lc,
        ) {
            Ok(m) => m,
            Err(e) => {
                return SeedOutcome {
                    rows,
                    summary: None,
                    error: Some(e),
                }
            }
        };
        if metrics.accuracy > best.0 {
            best = (metrics.accuracy, metrics.round);
        }
        if let (Some(t), None) = (config.output.target_accuracy, target_round) {
            if metrics.accuracy >= t {
                target_round = Some(metrics.round);
            }
        }
        rows.push(MetricsRow {
            seed,
            round: metrics.round,
            strategy,
            mode,
            accuracy: metrics.accuracy,
            train_loss: metrics.train_loss,
            client_drift: metrics.client_drift,
            calibration_penalty: metrics.calibration_penalty,
            lr: metrics.lr,
        });
    }
    SeedOutcome {
        rows,
        summary: Some(SeedSummary {
            seed,
            best_accuracy: best.0,
            best_round: best.1,
            target_round,
        }),
        error: None,
    }
}

/// Renders the full metrics file (header plus rows) as one string so the
/// write is a single atomic-enough operation and trivially byte-stable.
pub fn metrics_text(rows: &[MetricsRow]) -> String {
    let mut out = String::from(MetricsRow::HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}

/// Runs every configured seed on a pool of `workers` threads and writes the
/// metrics csv. On a seed failure the completed rows up to and including that
/// seed's partial run are flushed before the error is returned.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<ExperimentSummary> {
    config.validate()?;
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;

    let outcomes: Vec<SeedOutcome> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| run_seed(config, seed))
            .collect()
    });

    let metrics_path = config.metrics_path();
    if let Some(parent) = metrics_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut first_error = None;
    for outcome in outcomes {
        rows.extend(outcome.rows);
        if let Some(e) = outcome.error {
            first_error = Some(e);
            break;
        }
        summaries.push(outcome.summary.expect("summary when no error"));
    }
    fs::write(&metrics_path, metrics_text(&rows))?;
    if let Some(e) = first_error {
        return Err(e);
    }

    let mean_best_accuracy =
        summaries.iter().map(|s| s.best_accuracy).sum::<f64>() / summaries.len() as f64;
    Ok(ExperimentSummary {
        seeds: summaries,
        mean_best_accuracy,
        target_accuracy: config.output.target_accuracy,
        metrics_path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub instances: usize,
    pub min_slack: f64,
    pub max_lhs: f64,
}

/// Runs the randomized margin/transport suite. A violating instance is
/// serialized next to `replay_dir` for replay before the error returns.
pub fn run_theory_checks(instances: usize, seed: u64, replay_dir: &Path) -> Result<TheoryReport> {
    if instances == 0 {
        return Err(Error::Config("theory check needs at least one instance".into()));
    }
    let mut min_slack = f64::INFINITY;
    let mut max_lhs = 0.0f64;
    for index in 0..instances as u64 {
        let instance = random_theory_instance(seed, index);
        let report = instance.check()?;
        min_slack = min_slack.min(report.rhs - report.lhs);
        max_lhs = max_lhs.max(report.lhs);
        if !report.holds {
            fs::create_dir_all(replay_dir)?;
            let path = replay_dir.join(format!("theory-violation-{index}.json"));
            let mut file = fs::File::create(&path)?;
            file.write_all(serde_json::to_string_pretty(&instance).unwrap().as_bytes())?;
            return Err(Error::TheoryViolation(format!(
                "instance {index}: |margin gap| {} exceeds transport bound {}; instance saved to {}",
                report.lhs,
                report.rhs,
                path.display()
            )));
        }
    }
    Ok(TheoryReport {
        instances,
        min_slack,
        max_lhs,
    })
}

/// Trains the first configured seed for `rounds` rounds, then dumps the
/// features of every client shard plus the shared virtual data at `layer`.
/// VFA virtual rows exist only at the calibration layer; at any other layer
/// the natural features are exported alone.
pub fn export_features_at_round<W: Write>(
    config: &ExperimentConfig,
    rounds: usize,
    layer: usize,
    sink: &mut W,
) -> Result<usize> {
    config.validate()?;
    let seed = config.seeds[0];
    let mut world = build_world(config, seed)?;
    let lc = local_config(config);
    let per_round = config.resolved_clients_per_round();
    for _ in 0..rounds {
        run_round(
            &mut world.state,
            &world.spec,
            &world.train,
            &world.shards,
            world.virtual_data.as_ref(),
            &world.test,
            per_round,
            &lc,
        )?;
    }

    let shard_data: Vec<(usize, LabeledDataset)> = world
        .shards
        .iter()
        .map(|s| Ok((s.owner, world.train.subset(&s.indices)?)))
        .collect::<Result<_>>()?;
    let mut groups: Vec<FeatureGroup<'_>> = shard_data
        .iter()
        .map(|(owner, data)| FeatureGroup {
            client: *owner as i64,
            is_virtual: false,
            raw: false,
            data,
        })
        .collect();
    if let Some(v) = world.virtual_data.as_ref() {
        let vfa = config.vhl.mode == VhlMode::Vfa;
        let width = world.spec.layer_width(layer);
        if !vfa || width == Some(v.dim()) {
            groups.push(FeatureGroup {
                client: -1,
                is_virtual: true,
                raw: vfa,
                data: v,
            });
        }
    }
    export_features(&world.spec, &world.state.model, &groups, layer, sink)
}
