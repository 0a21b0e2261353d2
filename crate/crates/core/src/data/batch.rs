//! Stateless batch serving: a batch is a pure function of `(seed, step, B)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ShardSet;
use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// Leading fraction of records used for training; the rest is validation.
pub const TRAIN_NUMERATOR: usize = 9;
pub const TRAIN_DENOMINATOR: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BatchSpec {
    pub seed: u64,
    pub step: u64,
    pub batch_size: usize,
}

impl BatchSpec {
    /// Training record indices for this step. Sequence `i` of step `t` is
    /// global draw `t·B + i`; draws walk through one seeded permutation of
    /// the training records per epoch.
    pub fn record_indices(&self, n_train: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for i in 0..self.batch_size as u64 {
            let global = self.step * self.batch_size as u64 + i;
            let epoch = global / n_train as u64;
            let pos = (global % n_train as u64) as usize;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, epoch_permutation(self.seed, epoch, n_train)));
            }
            out.push(cached.as_ref().unwrap().1[pos]);
        }
        out
    }
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// `B` records of `C+1` tokens with per-target validity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordBatch {
    pub records: Vec<usize>,
    pub tokens: Vec<Vec<u16>>,
    pub mask: Vec<Vec<bool>>,
}

impl RecordBatch {
    pub fn to_token_batch(&self) -> Result<TokenBatch> {
        let b = self.tokens.len();
        let c = self.tokens.first().map_or(0, |r| r.len().saturating_sub(1));
        let mut inputs = Vec::with_capacity(b * c);
        let mut targets = Vec::with_capacity(b * c);
        let mut mask = Vec::with_capacity(b * c);
        for (row, valid) in self.tokens.iter().zip(&self.mask) {
            inputs.extend(row[..c].iter().map(|&t| t as usize));
            targets.extend(row[1..].iter().map(|&t| t as usize));
            mask.extend_from_slice(valid);
        }
        TokenBatch::new(b, c, inputs, targets, mask)
    }
}

impl ShardSet {
    pub fn num_train(&self) -> usize {
        self.num_records() * TRAIN_NUMERATOR / TRAIN_DENOMINATOR
    }

    pub fn num_validation(&self) -> usize {
        self.num_records() - self.num_train()
    }

    fn gather(&self, records: Vec<usize>) -> RecordBatch {
        let tokens = records.iter().map(|&k| self.record(k).to_vec()).collect();
        let mask = records.iter().map(|&k| self.target_mask(k)).collect();
        RecordBatch {
            records,
            tokens,
            mask,
        }
    }

    /// Training batch for `spec`. Steps past the end of an epoch continue
    /// into the next epoch's permutation.
    pub fn read_batch(&self, spec: BatchSpec) -> Result<RecordBatch> {
        let n = self.num_train();
        if n == 0 || spec.batch_size == 0 {
            return Err(Error::InvalidData(format!(
                "cannot serve batches of {} from {n} training records",
                spec.batch_size
            )));
        }
        Ok(self.gather(spec.record_indices(n)))
    }

    /// The first `sequences` validation records, in order, in batches of at
    /// most `batch_size`.
    pub fn validation_batches(&self, sequences: usize, batch_size: usize) -> Result<Vec<TokenBatch>> {
        let (start, avail) = (self.num_train(), self.num_validation());
        if sequences == 0 || batch_size == 0 || sequences > avail {
            return Err(Error::InvalidData(format!(
                "asked for {sequences} validation sequences, {avail} available"
            )));
        }
        let ids: Vec<usize> = (start..start + sequences).collect();
        ids.chunks(batch_size)
            .map(|chunk| self.gather(chunk.to_vec()).to_token_batch())
            .collect()
    }
}
