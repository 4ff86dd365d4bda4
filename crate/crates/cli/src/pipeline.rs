//! Training and evaluation stages shared by the subcommands.

use std::time::Instant;

use tokcom::channel::{sample_channel, FrameDraw};
use tokcom::datasets::{generate, split};
use tokcom::receiver::{train_receiver, Item, PackedSequence, ReceiverEpoch, TrainingSequence};
use tokcom::tokenizer::{
    kl_to_standard_normal, train_tokenizer, EpochTrace, Payload, Reconstruction,
};
use tokcom::{ChannelKind, Coder, Modality, Receiver, SeedTree, SourceSample, Stream, Tokenizer};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::metrics::{psnr, MetricName};

/// Generates the dataset and cuts the train/test split.
pub fn prepare_data(
    cfg: &ExperimentConfig,
    seeds: &SeedTree,
) -> CliResult<(Vec<SourceSample>, Vec<SourceSample>)> {
    let data = generate(&cfg.dataset_spec(seeds))?;
    Ok(split(
        &data,
        cfg.dataset.train_fraction,
        seeds.seed(Stream::Split, 0),
    )?)
}

/// Tokenizer and its channel coder, trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmitter {
    pub tokenizer: Tokenizer,
    pub coder: Coder,
}

pub fn fit_tokenizer(
    cfg: &ExperimentConfig,
    seeds: &SeedTree,
    train: &[SourceSample],
) -> CliResult<(Transmitter, Vec<EpochTrace>)> {
    let mut tokenizer = Tokenizer::new(cfg.tokenizer.clone(), seeds.master())?;
    let mut coder = Coder::new(cfg.coder_config(), &mut seeds.rng(Stream::Init, 3))?;
    let trace = train_tokenizer(
        &mut tokenizer,
        Some((&mut coder, cfg.train_schedule())),
        train,
        &cfg.train.tokenizer,
        seeds,
    )?;
    Ok((Transmitter { tokenizer, coder }, trace))
}

/// One frame draw per row at a fixed SNR; `+∞` gives a noiseless, unfaded frame.
pub fn frames_at<R: rand::Rng + ?Sized>(
    kind: ChannelKind,
    snr_db: f64,
    coder: &Coder,
    rows: usize,
    rng: &mut R,
) -> Vec<FrameDraw> {
    (0..rows)
        .map(|_| {
            if snr_db == f64::INFINITY {
                FrameDraw::noiseless(coder.symbols())
            } else {
                FrameDraw::sample(
                    sample_channel(kind, snr_db, coder.config.power, rng),
                    coder.symbols(),
                    rng,
                )
            }
        })
        .collect()
}

fn chunks(v: &[f64], width: usize) -> impl Iterator<Item = Item> + '_ {
    v.chunks(width).map(|c| Item::Continuous(c.to_vec()))
}

impl Transmitter {
    /// Clean latents `μ` for a batch.
    pub fn latents(&self, samples: &[SourceSample]) -> CliResult<Vec<Vec<f64>>> {
        Ok(self.tokenizer.encode_batch(samples)?)
    }

    /// Receiver-side latents `t̂` after the coded channel.
    pub fn transmit(&self, latents: &[Vec<f64>], frames: &[FrameDraw]) -> CliResult<Vec<Vec<f64>>> {
        Ok(self.coder.transmit_latents(latents, frames)?)
    }

    /// `t̂` over a noiseless, unfaded channel. The coder is trained jointly
    /// with the tokenizer decoder and need not invert itself, so this (and
    /// not `μ`) is the clean token the decoder understands.
    pub fn clean_tokens(&self, latents: &[Vec<f64>]) -> CliResult<Vec<Vec<f64>>> {
        let frames = vec![FrameDraw::noiseless(self.coder.symbols()); latents.len()];
        self.transmit(latents, &frames)
    }

    /// Receiver inputs and targets.
    ///
    /// Discrete: `[d̂_1..d̂_L, x_1..x_L]` where `d̂` is the tokenizer
    /// decoder's argmax on `t̂`; the source ids are the targets.
    /// Continuous: `[t̂ chunks, clean chunks]` with the clean tokens of
    /// [`Transmitter::clean_tokens`] as targets.
    pub fn sequences(
        &self,
        samples: &[&SourceSample],
        clean: &[&Vec<f64>],
        received: &[Vec<f64>],
        vocab: usize,
    ) -> CliResult<Vec<TrainingSequence>> {
        let w = self.tokenizer.config.token_width;
        let recon = match self.tokenizer.config.modality {
            Modality::Discrete => self.tokenizer.decode_batch(received)?,
            Modality::Continuous => Vec::new(),
        };
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (items, start): (Vec<Item>, usize) = match &s.payload {
                    Payload::Discrete(ids) => {
                        let hat = recon[i].ids().expect("discrete reconstruction");
                        let items = hat
                            .into_iter()
                            .chain(ids.iter().copied())
                            .map(Item::Discrete)
                            .collect();
                        (items, ids.len())
                    }
                    Payload::Continuous(_) => {
                        let items = chunks(&received[i], w).chain(chunks(clean[i], w)).collect();
                        (items, self.tokenizer.config.tokens)
                    }
                };
                Ok(TrainingSequence::new(
                    PackedSequence::from_items(items, vocab, w)?,
                    start,
                ))
            })
            .collect()
    }
}

pub fn fit_receiver(
    cfg: &ExperimentConfig,
    seeds: &SeedTree,
    tx: &Transmitter,
    train: &[SourceSample],
) -> CliResult<(Receiver, Vec<ReceiverEpoch>)> {
    let mut rx = Receiver::new(cfg.receiver.clone(), seeds.master())?;
    let latents = tx.latents(train)?;
    let clean = tx.clean_tokens(&latents)?;
    let schedule = cfg.train_schedule();
    let mut chan = seeds.rng(Stream::Channel, 1);
    let vocab = cfg.receiver.vocab;
    let trace = train_receiver(
        &mut rx,
        train.len(),
        &cfg.train.receiver,
        seeds,
        |idx, _| {
            let snr = schedule.draw_snr(&mut chan);
            let frames = frames_at(schedule.kind, snr, &tx.coder, idx.len(), &mut chan);
            let mu: Vec<Vec<f64>> = idx.iter().map(|&i| latents[i].clone()).collect();
            let received = tx.transmit(&mu, &frames).map_err(into_core)?;
            let targets: Vec<&Vec<f64>> = idx.iter().map(|&i| &clean[i]).collect();
            let samples: Vec<&SourceSample> = idx.iter().map(|&i| &train[i]).collect();
            tx.sequences(&samples, &targets, &received, vocab)
                .map_err(into_core)
        },
    )?;
    Ok((rx, trace))
}

fn into_core(e: CliError) -> tokcom::Error {
    match e {
        CliError::Core(e) => e,
        other => tokcom::Error::InvalidArgument(other.to_string()),
    }
}

/// Metric values at one SNR point and the generation wall time.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Vec<(MetricName, f64)>,
    pub samples: usize,
    pub seconds: f64,
}

impl Evaluation {
    pub fn get(&self, name: MetricName) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| *n == name).map(|m| m.1)
    }
}

/// Runs the full chain on the test set at one SNR.
///
/// Channel draws come from a stream that does not depend on the SNR, so
/// every SNR point sees the same fades and the same standardized noise.
pub fn evaluate(
    cfg: &ExperimentConfig,
    seeds: &SeedTree,
    tx: &Transmitter,
    rx: &Receiver,
    test: &[SourceSample],
    snr_db: f64,
) -> CliResult<Evaluation> {
    let n = cfg
        .eval
        .test_samples
        .map_or(test.len(), |m| m.min(test.len()));
    let test = &test[..n];
    if tx.tokenizer.config.tokens != cfg.tokenizer.tokens
        || rx.config.token_width != tx.tokenizer.config.token_width
    {
        return Err(CliError::Mismatch(
            "receiver and tokenizer disagree on token shape".into(),
        ));
    }
    let posterior = tx.tokenizer.posterior(test)?;
    let kl = posterior
        .iter()
        .map(|(m, s)| kl_to_standard_normal(m, s))
        .sum::<tokcom::Result<f64>>()?
        / n as f64;
    let latents: Vec<Vec<f64>> = posterior.into_iter().map(|(m, _)| m).collect();
    let clean = tx.clean_tokens(&latents)?;
    let frames = frames_at(
        cfg.channel.kind,
        snr_db,
        &tx.coder,
        n,
        &mut seeds.rng(Stream::Channel, 2),
    );

    let mut gen_rng = seeds.rng(Stream::Sampling, 3);
    let mut loss_rng = seeds.rng(Stream::Sampling, 4);
    let opts = cfg.eval.generation();
    let (mut lm, mut diff) = ((0.0, 0usize), (0.0, 0usize));
    let (mut correct, mut exact, mut positions) = (0usize, 0usize, 0usize);
    let (mut sq_err, mut elems) = (0.0, 0usize);
    let mut seconds = 0.0;

    for lo in (0..n).step_by(cfg.eval.batch) {
        let hi = (lo + cfg.eval.batch).min(n);
        let samples: Vec<&SourceSample> = test[lo..hi].iter().collect();
        let targets: Vec<&Vec<f64>> = clean[lo..hi].iter().collect();
        let received = tx.transmit(&latents[lo..hi], &frames[lo..hi])?;
        let seqs = tx.sequences(&samples, &targets, &received, rx.config.vocab)?;

        let draws = rx.sample_draws(&seqs, &mut loss_rng);
        let (l, d) = rx.batch_losses(&seqs, &draws)?;
        let rows = seqs.len();
        if let Some(l) = l {
            lm = (lm.0 + l * rows as f64, lm.1 + rows);
        }
        if let Some(d) = d {
            diff = (diff.0 + d * rows as f64, diff.1 + rows);
        }

        let start = seqs[0].loss_start;
        let plan = seqs[0].sequence.modality_mask()[start..].to_vec();
        let prefixes: Vec<PackedSequence> = seqs
            .iter()
            .map(|s| {
                let mut p = s.sequence.clone();
                p.truncate(start);
                p
            })
            .collect();
        let clock = Instant::now();
        let out = rx.generate_batch(&prefixes, &plan, opts, &mut gen_rng, None)?;
        let recon = match cfg.modality() {
            Modality::Discrete => Vec::new(),
            Modality::Continuous => {
                let t: Vec<Vec<f64>> = out.iter().map(|s| s.unpack().1[start..].concat()).collect();
                tx.tokenizer.decode_batch(&t)?
            }
        };
        seconds += clock.elapsed().as_secs_f64();

        for (k, s) in samples.iter().enumerate() {
            match (&s.payload, recon.get(k)) {
                (Payload::Discrete(ids), _) => {
                    let got = &out[k].unpack().0[start..];
                    let hits = got.iter().zip(ids).filter(|(a, b)| a == b).count();
                    correct += hits;
                    positions += ids.len();
                    exact += usize::from(hits == ids.len());
                }
                (Payload::Continuous(x), Some(Reconstruction::Continuous(y))) => {
                    sq_err += x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    elems += x.len();
                }
                _ => {
                    return Err(CliError::Mismatch(
                        "reconstruction modality differs from the source".into(),
                    ))
                }
            }
        }
    }

    let mut metrics = Vec::new();
    match cfg.modality() {
        Modality::Discrete => {
            metrics.push((MetricName::TokenAccuracy, correct as f64 / positions as f64));
            metrics.push((MetricName::SequenceExactMatch, exact as f64 / n as f64));
        }
        Modality::Continuous => {
            let mse = sq_err / elems as f64;
            metrics.push((MetricName::Mse, mse));
            metrics.push((MetricName::Psnr, psnr(mse, cfg.dataset.peak)));
        }
    }
    if lm.1 > 0 {
        metrics.push((MetricName::LmLoss, lm.0 / lm.1 as f64));
    }
    if diff.1 > 0 {
        metrics.push((MetricName::DiffLoss, diff.0 / diff.1 as f64));
    }
    metrics.push((MetricName::Kl, kl));
    Ok(Evaluation {
        metrics,
        samples: n,
        seconds,
    })
}
