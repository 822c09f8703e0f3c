use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use super::{ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::seeding::{rng_for, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Lda,
    TwoClass,
    Subset,
}

/// Partitioner selection plus its per-scheme knobs; unused knobs are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    #[serde(default = "default_scheme")]
    pub scheme: PartitionScheme,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_samples_per_client")]
    pub samples_per_client: usize,
    #[serde(default = "default_dominant_count")]
    pub dominant_count: usize,
    #[serde(default = "default_tail_low")]
    pub tail_low: usize,
    #[serde(default = "default_tail_high")]
    pub tail_high: usize,
}

fn default_scheme() -> PartitionScheme {
    PartitionScheme::Lda
}
fn default_clients() -> usize {
    10
}
fn default_alpha() -> f64 {
    0.1
}
fn default_samples_per_client() -> usize {
    500
}
fn default_dominant_count() -> usize {
    4950
}
fn default_tail_low() -> usize {
    5
}
fn default_tail_high() -> usize {
    6
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            scheme: default_scheme(),
            clients: default_clients(),
            alpha: default_alpha(),
            samples_per_client: default_samples_per_client(),
            dominant_count: default_dominant_count(),
            tail_low: default_tail_low(),
            tail_high: default_tail_high(),
        }
    }
}

impl PartitionSpec {
    pub fn partition(&self, dataset: &LabeledDataset, seed: u64) -> Result<Vec<ClientShard>> {
        match self.scheme {
            PartitionScheme::Lda => partition_lda(dataset, self.clients, self.alpha, seed),
            PartitionScheme::TwoClass => {
                partition_two_class(dataset, self.clients, self.samples_per_client, seed)
            }
            PartitionScheme::Subset => partition_subset(
                dataset,
                self.clients,
                self.dominant_count,
                self.tail_low,
                self.tail_high,
                seed,
            ),
        }
    }
}

/// Largest-remainder rounding of `n * q`, ties to the lowest index.
fn largest_remainder_counts(q: &[f64], n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = q.iter().map(|&p| (p * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..q.len()).collect();
    // Sort by descending fractional part; stable sort keeps index order on ties.
    order.sort_by(|&a, &b| {
        let fa = q[a] * n as f64 - (q[a] * n as f64).floor();
        let fb = q[b] * n as f64 - (q[b] * n as f64).floor();
        fb.partial_cmp(&fa).unwrap()
    });
    for k in 0..n.saturating_sub(assigned) {
        counts[order[k % q.len()]] += 1;
    }
    counts
}

/// Latent-Dirichlet partition: per class, proportions over clients are drawn
/// from Dirichlet(alpha) and the class's indices are split accordingly.
/// Partitions with an empty shard are re-drawn wholesale, at most 100 times.
pub fn partition_lda(
    dataset: &LabeledDataset,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Partition("alpha must be positive".into()));
    }
    if dataset.len() < clients {
        return Err(Error::Partition(format!(
            "dataset of {} cannot cover {} clients",
            dataset.len(),
            clients
        )));
    }
    if clients == 1 {
        return Ok(vec![ClientShard {
            owner: 0,
            indices: (0..dataset.len()).collect(),
        }]);
    }

    let dirichlet = Dirichlet::new_with_size(alpha, clients)
        .map_err(|e| Error::Partition(format!("dirichlet: {e}")))?;
    for attempt in 0..100u64 {
        let mut rng = rng_for(seed, Role::Partition, &[attempt]);
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for c in 0..dataset.class_count {
            let mut idx = dataset.class_indices(c);
            if idx.is_empty() {
                continue;
            }
            let q: Vec<f64> = dirichlet.sample(&mut rng);
            let counts = largest_remainder_counts(&q, idx.len());
            idx.shuffle(&mut rng);
            let mut off = 0;
            for (k, &cnt) in counts.iter().enumerate() {
                shards[k].extend_from_slice(&idx[off..off + cnt]);
                off += cnt;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards
                .into_iter()
                .enumerate()
                .map(|(owner, mut indices)| {
                    indices.sort_unstable();
                    ClientShard { owner, indices }
                })
                .collect());
        }
    }
    Err(Error::Partition(
        "no empty-shard-free draw in 100 attempts; alpha too extreme for this K".into(),
    ))
}

/// Each client holds exactly two seed-chosen classes, split evenly.
///
/// Clients take adjacent pairs from a seeded class permutation (wrapping),
/// so per-class demand is balanced and feasibility is checked up front.
pub fn partition_two_class(
    dataset: &LabeledDataset,
    clients: usize,
    samples_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if clients == 0 || samples_per_client < 2 {
        return Err(Error::Partition("need clients >= 1 and samples_per_client >= 2".into()));
    }
    if dataset.class_count < 2 {
        return Err(Error::Partition("two_class needs at least two classes".into()));
    }
    let mut rng = rng_for(seed, Role::Partition, &[]);
    let c = dataset.class_count;
    let mut class_order: Vec<usize> = (0..c).collect();
    class_order.shuffle(&mut rng);

    let take_first = samples_per_client.div_ceil(2);
    let take_second = samples_per_client / 2;
    let mut demand = vec![0usize; c];
    let mut choices = Vec::with_capacity(clients);
    for k in 0..clients {
        let a = class_order[(2 * k) % c];
        let b = class_order[(2 * k + 1) % c];
        demand[a] += take_first;
        demand[b] += take_second;
        choices.push((a, b));
    }

    let mut pools: Vec<Vec<usize>> = (0..c).map(|cl| dataset.class_indices(cl)).collect();
    for (cl, pool) in pools.iter_mut().enumerate() {
        if pool.len() < demand[cl] {
            return Err(Error::Partition(format!(
                "class {cl} has {} samples but {} are needed",
                pool.len(),
                demand[cl]
            )));
        }
        pool.shuffle(&mut rng);
    }

    let mut shards = Vec::with_capacity(clients);
    for (owner, (a, b)) in choices.into_iter().enumerate() {
        let cut_a = pools[a].len() - take_first;
        let mut indices: Vec<usize> = pools[a].split_off(cut_a);
        let cut_b = pools[b].len() - take_second;
        indices.extend(pools[b].split_off(cut_b));
        indices.sort_unstable();
        shards.push(ClientShard { owner, indices });
    }
    Ok(shards)
}

/// One dominant class per client plus a thin tail of every other class.
///
/// Client k's dominant class is k mod class_count; each remaining class
/// contributes tail_low or tail_high samples, chosen by the seeded stream.
pub fn partition_subset(
    dataset: &LabeledDataset,
    clients: usize,
    dominant_count: usize,
    tail_low: usize,
    tail_high: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if clients == 0 || dominant_count == 0 {
        return Err(Error::Partition("need clients >= 1 and dominant_count >= 1".into()));
    }
    if tail_low > tail_high || tail_low == 0 {
        return Err(Error::Partition("need 1 <= tail_low <= tail_high".into()));
    }
    if clients > dataset.class_count {
        return Err(Error::Partition(format!(
            "subset scheme needs K <= class_count, got K={clients} over {} classes",
            dataset.class_count
        )));
    }
    let mut rng = rng_for(seed, Role::Partition, &[]);
    let c = dataset.class_count;
    let mut pools: Vec<Vec<usize>> = (0..c).map(|cl| dataset.class_indices(cl)).collect();
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }

    let mut shards = Vec::with_capacity(clients);
    for owner in 0..clients {
        let dominant = owner % c;
        let mut indices = Vec::new();
        for class in 0..c {
            let want = if class == dominant {
                dominant_count
            } else if tail_low == tail_high {
                tail_low
            } else {
                rng.gen_range(tail_low..=tail_high)
            };
            let pool = &mut pools[class];
            if pool.len() < want {
                return Err(Error::Partition(format!(
                    "class {class} exhausted: {} left, client {owner} needs {want}",
                    pool.len()
                )));
            }
            indices.extend(pool.split_off(pool.len() - want));
        }
        indices.sort_unstable();
        shards.push(ClientShard { owner, indices });
    }
    Ok(shards)
}
