use serde::{Deserialize, Serialize};

use super::{Item, PackedSequence, Receiver};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::rng::{SeedTree, Stream};
use crate::train::{check_divergence, epoch_batches, TrainConfig};

/// A packed sequence whose positions from `loss_start` on are training targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub sequence: PackedSequence,
    pub loss_start: usize,
}

impl TrainingSequence {
    pub fn new(sequence: PackedSequence, loss_start: usize) -> Self {
        Self {
            sequence,
            loss_start,
        }
    }

    fn targets(&self) -> impl Iterator<Item = &Item> {
        self.sequence.items().iter().skip(self.loss_start.max(1))
    }

    pub fn discrete_targets(&self) -> usize {
        self.targets()
            .filter(|i| matches!(i, Item::Discrete(_)))
            .count()
    }

    pub fn continuous_targets(&self) -> usize {
        self.targets()
            .filter(|i| matches!(i, Item::Continuous(_)))
            .count()
    }
}

/// Sample-weighted epoch means; a head's entry is `None` when no batch had
/// targets for it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverEpoch {
    pub epoch: usize,
    pub total: f64,
    pub lm: Option<f64>,
    pub diff: Option<f64>,
}

/// Trains on `n` examples whose sequences are produced on demand by
/// `make_batch(indices, epoch)`, so the caller can stream fresh channel
/// realizations every epoch.
pub fn train_receiver<F>(
    rx: &mut Receiver,
    n: usize,
    train: &TrainConfig,
    seeds: &SeedTree,
    mut make_batch: F,
) -> Result<Vec<ReceiverEpoch>>
where
    F: FnMut(&[usize], usize) -> Result<Vec<TrainingSequence>>,
{
    train.validate()?;
    if n == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    let mut shuffle = seeds.rng(Stream::Training, 2);
    let mut noise = seeds.rng(Stream::Sampling, 2);
    let mut opt = train.optimizer();
    let mut trace = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let (mut total, mut lm, mut diff) = (0.0, (0.0, 0.0), (0.0, 0.0));
        for idx in epoch_batches(n, train.batch_size, &mut shuffle) {
            let batch = make_batch(&idx, epoch)?;
            let draws = rx.sample_draws(&batch, &mut noise);
            let (vals, grads, binding) = {
                let mut g = Graph::new();
                let p = rx.params.bind(&mut g);
                let vars = rx.loss_graph(&mut g, &p, &batch, &draws)?;
                let vals = (
                    g.scalar(vars.total),
                    vars.lm.map(|v| g.scalar(v)),
                    vars.diff.map(|v| g.scalar(v)),
                );
                check_divergence(epoch, vals.0)?;
                (vals, g.backward(vars.total)?, p)
            };
            rx.params.accumulate(&binding, &grads)?;
            opt.step(&mut rx.params)?;
            let w = batch.len() as f64;
            total += w * vals.0;
            if let Some(v) = vals.1 {
                lm = (lm.0 + w * v, lm.1 + w);
            }
            if let Some(v) = vals.2 {
                diff = (diff.0 + w * v, diff.1 + w);
            }
        }
        let mean = |(s, w): (f64, f64)| (w > 0.0).then(|| s / w);
        trace.push(ReceiverEpoch {
            epoch,
            total: total / n as f64,
            lm: mean(lm),
            diff: mean(diff),
        });
    }
    Ok(trace)
}
