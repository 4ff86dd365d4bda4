use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Item, PackedSequence, Receiver, SamplingNoise};
use crate::error::{Error, Result};
use crate::tokenizer::Modality;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenStrategy {
    /// Argmax, ties to the lowest id.
    #[default]
    Greedy,
    /// Nucleus sampling over the smallest descending-probability prefix
    /// with mass `>= p`.
    TopP { p: f64 },
    /// Samples from `probs^(1/τ)` renormalized.
    Temperature { tau: f64 },
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

fn draw<R: Rng + ?Sized>(weights: &[(usize, f64)], rng: &mut R) -> usize {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(id, w) in weights {
        if u < w {
            return id;
        }
        u -= w;
    }
    weights
        .iter()
        .rev()
        .find(|w| w.1 > 0.0)
        .map_or(weights[0].0, |w| w.0)
}

pub fn sample_token<R: Rng + ?Sized>(
    probs: &[f64],
    strategy: TokenStrategy,
    rng: &mut R,
) -> Result<usize> {
    if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid(
            "sample_token needs a non-empty, non-negative distribution",
        ));
    }
    match strategy {
        TokenStrategy::Greedy => Ok(argmax(probs)),
        TokenStrategy::TopP { p } => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid(format!("top-p needs p in (0, 1], got {p}")));
            }
            let mut order: Vec<(usize, f64)> = probs.iter().copied().enumerate().collect();
            order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            if p < 1.0 {
                let mut mass = 0.0;
                let mut keep = order.len();
                for (k, (_, q)) in order.iter().enumerate() {
                    mass += q;
                    if mass >= p {
                        keep = k + 1;
                        break;
                    }
                }
                order.truncate(keep);
            }
            Ok(draw(&order, rng))
        }
        TokenStrategy::Temperature { tau } => {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::invalid(format!(
                    "temperature must be positive, got {tau}"
                )));
            }
            let max = probs.iter().copied().fold(0.0, f64::max);
            let w: Vec<(usize, f64)> = probs
                .iter()
                .enumerate()
                .map(|(i, q)| {
                    (
                        i,
                        if *q > 0.0 {
                            (q / max).powf(1.0 / tau)
                        } else {
                            0.0
                        },
                    )
                })
                .collect();
            Ok(draw(&w, rng))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub strategy: TokenStrategy,
    pub noise: SamplingNoise,
}

/// One generated position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub position: usize,
    pub modality: Modality,
    pub value: Item,
    /// `−ln p(id)` for discrete positions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    /// Reverse steps run for continuous positions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diffusion_steps: Option<usize>,
}

impl TranscriptRecord {
    pub fn write_jsonl<W: Write>(records: &[TranscriptRecord], mut out: W) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl Receiver {
    /// Autoregressively extends `prefix` by one token per entry of `plan`.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        prefix: &PackedSequence,
        plan: &[Modality],
        opts: GenerationOptions,
        rng: &mut R,
        transcript: Option<&mut Vec<TranscriptRecord>>,
    ) -> Result<PackedSequence> {
        let mut out =
            self.generate_batch(std::slice::from_ref(prefix), plan, opts, rng, transcript)?;
        Ok(out.remove(0))
    }

    /// Generation for many prefixes in lockstep; one forward pass per step
    /// covers every sequence. The transcript, if any, records the first one.
    pub fn generate_batch<R: Rng + ?Sized>(
        &self,
        prefixes: &[PackedSequence],
        plan: &[Modality],
        opts: GenerationOptions,
        rng: &mut R,
        mut transcript: Option<&mut Vec<TranscriptRecord>>,
    ) -> Result<Vec<PackedSequence>> {
        let mut seqs = prefixes.to_vec();
        if plan.is_empty() {
            return Ok(seqs);
        }
        for s in &seqs {
            if s.is_empty() {
                return Err(Error::invalid("generation needs a non-empty prefix"));
            }
            if s.len() + plan.len() > self.config.max_len {
                return Err(Error::SequenceTooLong {
                    len: s.len() + plan.len(),
                    max: self.config.max_len,
                });
            }
        }
        for &m in plan {
            let refs: Vec<&PackedSequence> = seqs.iter().collect();
            let hs = self.last_hidden(&refs)?;
            let continuous = match m {
                Modality::Continuous => self.diffusion.sample_batch(
                    &self.params,
                    &hs.concat(),
                    &self.schedule,
                    opts.noise,
                    rng,
                )?,
                Modality::Discrete => Vec::new(),
            };
            let mut continuous = continuous.into_iter();
            for (k, (seq, h)) in seqs.iter_mut().zip(&hs).enumerate() {
                let position = seq.len();
                let (item, nll, steps) = match m {
                    Modality::Discrete => {
                        let probs = self.lm_probs(h)?;
                        let id = sample_token(&probs, opts.strategy, rng)?;
                        (Item::Discrete(id), Some(-probs[id].ln()), None)
                    }
                    Modality::Continuous => {
                        let c = continuous.next().expect("one sample per sequence");
                        (Item::Continuous(c), None, Some(self.schedule.steps()))
                    }
                };
                if k == 0 {
                    if let Some(t) = transcript.as_deref_mut() {
                        t.push(TranscriptRecord {
                            position,
                            modality: m,
                            value: item.clone(),
                            nll,
                            diffusion_steps: steps,
                        });
                    }
                }
                seq.push(item)?;
            }
        }
        Ok(seqs)
    }
}
