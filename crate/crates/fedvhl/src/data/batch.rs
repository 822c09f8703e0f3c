use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::seeding::{rng_for, Role};

/// One training step's worth of sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedBatch {
    /// Indices into the natural parent dataset.
    pub natural: Vec<usize>,
    /// Indices into the virtual dataset.
    pub virtual_indices: Vec<usize>,
}

/// Per-epoch batch sequence: natural indices shuffled and consumed without
/// replacement in chunks of `b_d`, each chunk paired with `b_v` virtual
/// indices drawn uniformly with replacement.
pub struct MixedBatchIter {
    order: Vec<usize>,
    cursor: usize,
    b_d: usize,
    b_v: usize,
    virtual_len: usize,
    virtual_rng: ChaCha8Rng,
}

pub fn mixed_batch_iter(
    shard: &ClientShard,
    virtual_data: Option<&LabeledDataset>,
    b_d: usize,
    b_v: usize,
    epoch_seed: u64,
) -> Result<MixedBatchIter> {
    if b_d == 0 {
        return Err(Error::Config("natural batch size must be at least 1".into()));
    }
    if shard.indices.is_empty() {
        return Err(Error::Config(format!("client {} shard is empty", shard.owner)));
    }
    let virtual_len = virtual_data.map_or(0, |v| v.len());
    if b_v > 0 && virtual_len == 0 {
        return Err(Error::Config(
            "virtual batch size is positive but there is no virtual dataset".into(),
        ));
    }
    let mut order = shard.indices.clone();
    order.shuffle(&mut rng_for(epoch_seed, Role::BatchShuffle, &[]));
    Ok(MixedBatchIter {
        order,
        cursor: 0,
        b_d,
        b_v,
        virtual_len,
        virtual_rng: rng_for(epoch_seed, Role::VirtualDraw, &[]),
    })
}

impl Iterator for MixedBatchIter {
    type Item = MixedBatch;

    fn next(&mut self) -> Option<MixedBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.b_d).min(self.order.len());
        let natural = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let virtual_indices = (0..self.b_v)
            .map(|_| self.virtual_rng.gen_range(0..self.virtual_len))
            .collect();
        Some(MixedBatch {
            natural,
            virtual_indices,
        })
    }
}
