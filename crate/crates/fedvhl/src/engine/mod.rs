//! Federated round loop: seeded client selection, parallel local training
//! with pluggable strategy hooks, aggregation, and round metrics.

mod aggregate;

pub use aggregate::{aggregate_fedavg, aggregate_fednova, client_drift, scaffold_server_update};

use ndarray::s;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mixed_batch_iter, ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{forward, sgd_momentum_step, Gradient, MlpSpec, ModelParams};
use crate::objective::{vhl_step_loss, VhlConfig, VhlMode};
use crate::seeding::{derive_seed, rng_for, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fedavg,
    Fedprox,
    Scaffold,
    Fednova,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fedavg => "fedavg",
            Strategy::Fedprox => "fedprox",
            Strategy::Scaffold => "scaffold",
            Strategy::Fednova => "fednova",
        }
    }
}

/// SCAFFOLD control variates; shapes mirror the model.
#[derive(Debug, Clone)]
pub struct ScaffoldState {
    pub server: Gradient,
    pub clients: Vec<Gradient>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub model: ModelParams,
    pub strategy: Strategy,
    pub scaffold: Option<ScaffoldState>,
    pub master_seed: u64,
    pub total_clients: usize,
}

impl ServerState {
    pub fn new(
        spec: &MlpSpec,
        strategy: Strategy,
        master_seed: u64,
        total_clients: usize,
        model: ModelParams,
    ) -> Self {
        let scaffold = (strategy == Strategy::Scaffold).then(|| ScaffoldState {
            server: Gradient::zeros(spec),
            clients: vec![Gradient::zeros(spec); total_clients],
        });
        Self {
            round: 0,
            model,
            strategy,
            scaffold,
            master_seed,
            total_clients,
        }
    }
}

/// Everything a client needs for one round of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub b_d: usize,
    pub b_v: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub fedprox_mu: f64,
    pub vhl: VhlConfig,
}

impl LocalConfig {
    fn effective_b_v(&self) -> usize {
        if self.vhl.mode == VhlMode::Off {
            0
        } else {
            self.b_v
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    pub model: ModelParams,
    pub n: usize,
    pub steps: usize,
    /// Replacement control variate, scaffold only.
    pub new_variate: Option<Gradient>,
    pub loss_sum: f64,
    pub penalty_sum: f64,
    pub alignment_missing_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub accuracy: f64,
    pub train_loss: f64,
    pub client_drift: f64,
    pub calibration_penalty: f64,
    pub lr: f64,
    pub selected: Vec<usize>,
}

/// Round-decayed learning rate.
pub fn lr_at_round(base_lr: f64, decay: f64, round: usize) -> f64 {
    base_lr * decay.powi(round as i32)
}

/// E local passes over the client's mixed batches from the global model.
///
/// Strategy hooks: FedProx adds mu*(w - w_r) to each step's gradient;
/// SCAFFOLD adds (c - c_i) and returns the option-II replacement variate.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    spec: &MlpSpec,
    global: &ModelParams,
    dataset: &LabeledDataset,
    shard: &ClientShard,
    virtual_data: Option<&LabeledDataset>,
    cfg: &LocalConfig,
    scaffold: Option<(&Gradient, &Gradient)>,
    round: usize,
    master_seed: u64,
) -> Result<ClientUpdate> {
    if cfg.epochs == 0 {
        return Err(Error::Config("local epochs must be at least 1".into()));
    }
    let lr = lr_at_round(cfg.base_lr, cfg.lr_decay, round);
    let mut params = global.clone();
    let mut momentum = Gradient::zeros_like(global);
    let mut steps = 0usize;
    let mut loss_sum = 0.0;
    let mut penalty_sum = 0.0;
    let mut alignment_missing_steps = 0usize;

    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(
            master_seed,
            Role::ClientLocal,
            &[round as u64, shard.owner as u64, epoch as u64],
        );
        let iter = mixed_batch_iter(shard, virtual_data, cfg.b_d, cfg.effective_b_v(), epoch_seed)?;
        for batch in iter {
            let nat_x = dataset.rows(&batch.natural);
            let nat_y = dataset.labels_at(&batch.natural);
            let (virt_x, virt_y) = match virtual_data {
                Some(v) if !batch.virtual_indices.is_empty() => (
                    v.rows(&batch.virtual_indices),
                    v.labels_at(&batch.virtual_indices),
                ),
                _ => (ndarray::Array2::zeros((0, spec.input_dim())), Vec::new()),
            };
            let (loss, mut grad, diag) = vhl_step_loss(
                spec,
                &params,
                nat_x.view(),
                &nat_y,
                virt_x.view(),
                &virt_y,
                &cfg.vhl,
            )
            .map_err(|e| match e {
                Error::NonFinite { .. } | Error::DegenerateFeature { .. } => Error::Divergence {
                    client: shard.owner,
                    round,
                    step: steps,
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    client: shard.owner,
                    round,
                    step: steps,
                });
            }
            if cfg.fedprox_mu != 0.0 {
                let prox = Gradient::from_param_diff(&params, global, cfg.fedprox_mu);
                grad.add_scaled(1.0, &prox);
            }
            if let Some((c, c_i)) = scaffold {
                grad.add_scaled(1.0, c);
                grad.add_scaled(-1.0, c_i);
            }
            sgd_momentum_step(&mut params, &grad, lr, cfg.momentum, cfg.weight_decay, &mut momentum)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Divergence {
                        client: shard.owner,
                        round,
                        step: steps,
                    },
                    other => other,
                })?;
            loss_sum += loss;
            penalty_sum += diag.penalty;
            if diag.alignment_missing {
                alignment_missing_steps += 1;
            }
            steps += 1;
        }
    }
    if !params.is_finite() {
        return Err(Error::Divergence {
            client: shard.owner,
            round,
            step: steps,
        });
    }

    // Option-II variate replacement: c_i+ = c_i - c + (w_r - w_k)/(tau * lr).
    let new_variate = scaffold.map(|(c, c_i)| {
        let mut v = Gradient::from_param_diff(global, &params, 1.0 / (steps as f64 * lr));
        v.add_scaled(1.0, c_i);
        v.add_scaled(-1.0, c);
        v
    });

    Ok(ClientUpdate {
        client: shard.owner,
        model: params,
        n: shard.n(),
        steps,
        new_variate,
        loss_sum,
        penalty_sum,
        alignment_missing_steps,
    })
}

/// Accuracy over the natural classes only: argmax of the first C_d logits.
pub fn evaluate_accuracy(spec: &MlpSpec, params: &ModelParams, test: &LabeledDataset) -> Result<f64> {
    let mut correct = 0usize;
    let chunk = 512;
    let n = test.len();
    let mut row = 0;
    while row < n {
        let end = (row + chunk).min(n);
        let trace = forward(spec, params, test.features.slice(s![row..end, ..]))?;
        for (i, logits) in trace.logits.axis_iter(ndarray::Axis(0)).enumerate() {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for c in 0..spec.natural_classes {
                if logits[c] > best.0 {
                    best = (logits[c], c);
                }
            }
            if best.1 == test.labels[row + i] {
                correct += 1;
            }
        }
        row = end;
    }
    Ok(correct as f64 / n as f64)
}

/// One federated round: select, broadcast, train in parallel, aggregate,
/// measure. Client results are reduced in ascending client-id order, so the
/// outcome is independent of worker scheduling.
pub fn run_round(
    state: &mut ServerState,
    spec: &MlpSpec,
    dataset: &LabeledDataset,
    shards: &[ClientShard],
    virtual_data: Option<&LabeledDataset>,
    test_set: &LabeledDataset,
    clients_per_round: usize,
    cfg: &LocalConfig,
) -> Result<RoundMetrics> {
    if shards.is_empty() || clients_per_round == 0 {
        return Err(Error::Config("need at least one selectable client".into()));
    }
    if clients_per_round > shards.len() {
        return Err(Error::Config(format!(
            "cannot select {clients_per_round} of {} clients",
            shards.len()
        )));
    }
    if matches!(cfg.vhl.mode, VhlMode::Full | VhlMode::Naive | VhlMode::Vfa) && cfg.b_v == 0 {
        return Err(Error::Config("vhl modes need a positive virtual batch size".into()));
    }
    let round = state.round;

    let mut ids: Vec<usize> = (0..shards.len()).collect();
    let mut rng = rng_for(state.master_seed, Role::ClientSelection, &[round as u64]);
    ids.shuffle(&mut rng);
    let mut selected: Vec<usize> = ids[..clients_per_round].to_vec();
    selected.sort_unstable();

    let global = state.model.clone();
    let scaffold_pairs: Vec<Option<(Gradient, Gradient)>> = selected
        .iter()
        .map(|&k| {
            state
                .scaffold
                .as_ref()
                .map(|sc| (sc.server.clone(), sc.clients[k].clone()))
        })
        .collect();

    let results: Vec<Result<ClientUpdate>> = selected
        .par_iter()
        .zip(scaffold_pairs.par_iter())
        .map(|(&k, sc)| {
            local_train(
                spec,
                &global,
                dataset,
                &shards[k],
                virtual_data,
                cfg,
                sc.as_ref().map(|(c, ci)| (c, ci)),
                round,
                state.master_seed,
            )
        })
        .collect();
    let mut updates = Vec::with_capacity(results.len());
    for r in results {
        updates.push(r?);
    }

    let total_n: usize = updates.iter().map(|u| u.n).sum();
    let weights: Vec<f64> = updates.iter().map(|u| u.n as f64 / total_n as f64).collect();

    let aggregated = match state.strategy {
        Strategy::Fedavg | Strategy::Fedprox => aggregate_fedavg(&updates, &weights)?,
        Strategy::Fednova => aggregate_fednova(&state.model, &updates, &weights)?,
        Strategy::Scaffold => {
            let sc = state.scaffold.as_mut().expect("scaffold state");
            scaffold_server_update(sc, &updates, state.total_clients)?;
            aggregate_fedavg(&updates, &weights)?
        }
    };
    if !aggregated.is_finite() {
        return Err(Error::Aggregation("aggregated model is non-finite".into()));
    }

    let drift = client_drift(&aggregated, updates.iter().map(|u| &u.model))?;
    let total_steps: usize = updates.iter().map(|u| u.steps).sum();
    let train_loss = updates.iter().map(|u| u.loss_sum).sum::<f64>() / total_steps as f64;
    let penalty = updates.iter().map(|u| u.penalty_sum).sum::<f64>() / total_steps as f64;

    state.model = aggregated;
    state.round += 1;
    let accuracy = evaluate_accuracy(spec, &state.model, test_set)?;

    Ok(RoundMetrics {
        round,
        accuracy,
        train_loss,
        client_drift: drift,
        calibration_penalty: penalty,
        lr: lr_at_round(cfg.base_lr, cfg.lr_decay, round),
        selected,
    })
}
