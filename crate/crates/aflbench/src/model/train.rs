//! Local SGD producing client deltas.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{loss_and_gradient, Dataset, ParamVector, TaskSpec};
use crate::{Error, Result};

/// Without-replacement minibatch index stream, reshuffled each epoch.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl MinibatchSampler {
    /// `batch_size` of `None` (or anything >= `len`) means full-batch,
    /// in which case no shuffling entropy is consumed.
    pub fn new(len: usize, batch_size: Option<usize>, rng_seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidInput("cannot sample from an empty dataset".into()));
        }
        let batch_size = batch_size.unwrap_or(len).min(len);
        if batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut order: Vec<usize> = (0..len).collect();
        // Shuffle up front so the seed matters from the first batch.
        if batch_size < len {
            order.shuffle(&mut rng);
        }
        Ok(Self { order, pos: 0, batch_size, rng })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.batch_size == self.order.len() {
            return self.order.clone();
        }
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let batch = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        batch
    }
}

/// Runs `steps` SGD steps in place, drawing batches from `sampler`.
pub fn sgd_steps(
    task: &TaskSpec,
    params: &mut ParamVector,
    data: &Dataset,
    steps: usize,
    eta_l: f64,
    sampler: &mut MinibatchSampler,
) -> Result<()> {
    for _ in 0..steps {
        let batch = data.subset(&sampler.next_batch())?;
        let (_, grad) = loss_and_gradient(task, params, &batch)?;
        params.axpy(-eta_l, &grad)?;
    }
    Ok(())
}

/// `Q` seeded minibatch SGD steps from `start`; returns the delta
/// `y_Q - y_0`. Deterministic given `rng_seed`.
pub fn local_train(
    task: &TaskSpec,
    start: &ParamVector,
    data: &Dataset,
    q: usize,
    eta_l: f64,
    batch_size: Option<usize>,
    rng_seed: u64,
) -> Result<ParamVector> {
    if q == 0 {
        return Err(Error::InvalidInput("Q must be >= 1".into()));
    }
    if !(eta_l > 0.0) {
        return Err(Error::InvalidInput("eta_l must be > 0".into()));
    }
    let mut sampler = MinibatchSampler::new(data.len(), batch_size, rng_seed)?;
    let mut y = start.clone();
    sgd_steps(task, &mut y, data, q, eta_l, &mut sampler)?;
    y.sub(start)
}
