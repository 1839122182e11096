use rand::seq::SliceRandom;

use crate::Rng;

/// Epoch-based sampler: reshuffles at every epoch start and drops the
/// incomplete tail batch. Batches larger than the dataset are clamped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
    epoch: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, rng: Rng) -> Self {
        let batch = batch.clamp(1, len.max(1));
        Self { order: (0..len).collect(), batch, pos: usize::MAX, epoch: 0, rng }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch
    }

    /// Completed epochs (the one in progress is not counted).
    pub fn epoch(&self) -> usize {
        self.epoch.saturating_sub(1)
    }

    /// The next batch and whether it closes an epoch.
    pub fn next_batch(&mut self) -> (Vec<usize>, bool) {
        if self.pos == usize::MAX || self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let batch = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        (batch, self.pos + self.batch > self.order.len())
    }
}
