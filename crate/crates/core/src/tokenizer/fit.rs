use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LossBreakdown, SourceSample, Tokenizer, VarianceMode, SIGMA_FLOOR};
use crate::autodiff::Graph;
use crate::channel::{sample_channel, ChannelKind, CodedChannel, Coder, FrameDraw};
use crate::error::{Error, Result};
use crate::rng::{SeedTree, Stream};
use crate::train::{check_divergence, epoch_batches, TrainConfig};

/// Channel conditions for channel-in-the-loop training. The SNR is drawn
/// uniformly from `snr_db` once per batch; equal bounds pin it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSchedule {
    pub kind: ChannelKind,
    pub snr_db: (f64, f64),
}

impl ChannelSchedule {
    pub fn noiseless() -> Self {
        Self {
            kind: ChannelKind::Awgn,
            snr_db: (f64::INFINITY, f64::INFINITY),
        }
    }

    pub fn draw_snr<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.snr_db;
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    }

    /// One frame draw per row, all at one SNR drawn for the batch.
    pub fn draw_frames<R: Rng + ?Sized>(
        &self,
        rows: usize,
        coder: &Coder,
        rng: &mut R,
    ) -> Vec<FrameDraw> {
        let snr = self.draw_snr(rng);
        (0..rows)
            .map(|_| {
                let c = sample_channel(self.kind, snr, coder.config.power, rng);
                FrameDraw::sample(c, coder.symbols(), rng)
            })
            .collect()
    }
}

/// Sample-weighted epoch means of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub total: f64,
    pub kl: f64,
    pub stochastic: f64,
    pub deterministic: f64,
}

/// Trains the tokenizer, and the channel coder when given, through the channel.
///
/// Batches are shuffled from the `Training` stream, ε from `Sampling`, and
/// channel draws from `Channel`, all under `seeds`. σ is never touched.
pub fn train_tokenizer(
    tok: &mut Tokenizer,
    mut coder: Option<(&mut Coder, ChannelSchedule)>,
    data: &[SourceSample],
    train: &TrainConfig,
    seeds: &SeedTree,
) -> Result<Vec<EpochTrace>> {
    train.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some((c, _)) = &coder {
        if c.config.latent_dim != tok.latent_dim() {
            return Err(Error::shape(
                "coder latent",
                &[c.config.latent_dim],
                &[tok.latent_dim()],
            ));
        }
    }
    let mut shuffle = seeds.rng(Stream::Training, 0);
    let mut sampling = seeds.rng(Stream::Sampling, 0);
    let mut chan_rng = seeds.rng(Stream::Channel, 0);
    let mut opt = train.optimizer();
    let mut coder_opt = train.optimizer();
    let mut trace = Vec::with_capacity(train.epochs);

    for epoch in 0..train.epochs {
        let mut sums = [0.0; 4];
        for idx in epoch_batches(data.len(), train.batch_size, &mut shuffle) {
            let batch: Vec<&SourceSample> = idx.iter().map(|&i| &data[i]).collect();
            let draws = tok.noise_draws(batch.len(), &mut sampling);
            let (values, grads, binding, coder_binding) = {
                let mut g = Graph::new();
                let p = tok.params.bind(&mut g);
                let (vars, cb) = match &coder {
                    None => (
                        tok.loss_graph(
                            &mut g,
                            &p,
                            &batch,
                            &draws,
                            &crate::channel::IdentityChannel,
                        )?,
                        None,
                    ),
                    Some((c, sched)) => {
                        let frames = sched.draw_frames(batch.len(), c, &mut chan_rng);
                        let cb = c.params.bind(&mut g);
                        let chan = CodedChannel::new(c, cb.clone(), frames);
                        (tok.loss_graph(&mut g, &p, &batch, &draws, &chan)?, Some(cb))
                    }
                };
                let values = vars.values(&g);
                check_divergence(epoch, values.total)?;
                (values, g.backward(vars.total)?, p, cb)
            };
            tok.params.accumulate(&binding, &grads)?;
            opt.step(&mut tok.params)?;
            if let (Some((c, _)), Some(cb)) = (&mut coder, coder_binding) {
                c.params.accumulate(&cb, &grads)?;
                coder_opt.step(&mut c.params)?;
            }
            let w = batch.len() as f64;
            let LossBreakdown {
                total,
                kl,
                stochastic,
                deterministic,
            } = values;
            for (s, v) in sums.iter_mut().zip([total, kl, stochastic, deterministic]) {
                *s += w * v;
            }
        }
        let n = data.len() as f64;
        trace.push(EpochTrace {
            epoch,
            total: sums[0] / n,
            kl: sums[1] / n,
            stochastic: sums[2] / n,
            deterministic: sums[3] / n,
        });
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceProfile {
    /// Standard deviation of `μ_d` across the dataset.
    pub mu_std: Vec<f64>,
    /// Fixed σ, or the dataset mean of the learned σ.
    pub sigma: Vec<f64>,
    pub learned: bool,
    /// Dimensions with `σ < 0.05` and `std(μ) < 0.05`.
    pub collapsed: usize,
}

pub fn variance_profile(tok: &Tokenizer, data: &[SourceSample]) -> Result<VarianceProfile> {
    if data.is_empty() {
        return Err(Error::invalid("variance profile needs data"));
    }
    let post = tok.posterior(data)?;
    let d = tok.latent_dim();
    let n = post.len() as f64;
    let mut mu_std = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    for j in 0..d {
        let col: Vec<f64> = post.iter().map(|(m, _)| m[j]).collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mu_std[j] = if lo == hi {
            0.0
        } else {
            let mean = col.iter().sum::<f64>() / n;
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        };
        sigma[j] = post.iter().map(|(_, s)| s[j]).sum::<f64>() / n;
    }
    let learned = tok.config.variance == VarianceMode::Learned;
    if !learned {
        sigma = tok.sigma().to_vec();
    }
    let collapsed = (0..d)
        .filter(|&j| sigma[j] < SIGMA_FLOOR && mu_std[j] < SIGMA_FLOOR)
        .count();
    Ok(VarianceProfile {
        mu_std,
        sigma,
        learned,
        collapsed,
    })
}
