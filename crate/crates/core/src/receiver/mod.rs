//! Causal transformer receiver with a softmax head for discrete positions
//! and a diffusion head for continuous ones.
//!
//! Position `i` of a sequence is predicted from the hidden state at `i − 1`.

mod diffusion;
mod fit;
mod generate;
mod sequence;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{init_tensor, Init, LayerNorm, Linear, Mlp};
use crate::rng::{SeedTree, Stream};

pub use diffusion::{
    diffusion_forward, diffusion_forward_with, diffusion_loss_with, diffusion_sample_with,
    predict_x0, timestep_embedding, train_head, DiffusionDraw, DiffusionHead, DiffusionSchedule,
    SamplingNoise, TIME_EMBED_DIM,
};
pub use fit::{train_receiver, ReceiverEpoch, TrainingSequence};
pub use generate::{sample_token, GenerationOptions, TokenStrategy, TranscriptRecord};
pub use sequence::{pack_tokens, Item, PackedSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MllmConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Reals per continuous token.
    pub token_width: usize,
    /// Feed-forward width as a multiple of `hidden`.
    pub ff_mult: usize,
    pub diffusion_steps: usize,
    pub phi_start: f64,
    pub phi_end: f64,
    pub head_hidden: usize,
    pub lm_weight: f64,
    pub diff_weight: f64,
}

impl Default for MllmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            vocab: 64,
            max_len: 64,
            token_width: 1,
            ff_mult: 4,
            diffusion_steps: 50,
            phi_start: 0.02,
            phi_end: 0.1,
            head_hidden: 128,
            lm_weight: 1.0,
            diff_weight: 1.0,
        }
    }
}

impl MllmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("receiver: {m}")));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden must be a positive multiple of heads");
        }
        if self.vocab == 0
            || self.max_len == 0
            || self.token_width == 0
            || self.ff_mult == 0
            || self.head_hidden == 0
        {
            return bad("vocab, max_len, token_width, ff_mult and head_hidden must be positive");
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps must be positive");
        }
        if !(self.phi_start > 0.0 && self.phi_end < 1.0 && self.phi_start <= self.phi_end) {
            return bad("need 0 < phi_start <= phi_end < 1");
        }
        if !(self.lm_weight >= 0.0 && self.diff_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.diffusion_steps, self.phi_start, self.phi_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    norm1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm2: LayerNorm,
    ff: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Receiver {
    pub config: MllmConfig,
    pub params: ParamStore,
    token_embed: ParamId,
    continuous_in: ParamId,
    modality_embed: ParamId,
    position_embed: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    lm_head: ParamId,
    pub diffusion: DiffusionHead,
    schedule: DiffusionSchedule,
}

/// Graph nodes of one receiver loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ReceiverLossVars {
    pub total: Var,
    pub lm: Option<Var>,
    pub diff: Option<Var>,
}

impl Receiver {
    pub fn new(config: MllmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let mut rng = SeedTree::new(seed).rng(Stream::Init, 2);
        let d = config.hidden;
        let mut params = ParamStore::new();
        let embed = Init::Normal(0.02f64.max(1.0 / (d as f64).sqrt()));
        let token_embed = params.add(
            "rx.token_embed",
            init_tensor(config.vocab, d, embed, &mut rng),
        );
        let continuous_in = params.add(
            "rx.continuous_in",
            init_tensor(config.token_width, d, Init::Scaled, &mut rng),
        );
        let modality_embed = params.add("rx.modality_embed", init_tensor(2, d, embed, &mut rng));
        let position_embed = params.add(
            "rx.position_embed",
            init_tensor(config.max_len, d, embed, &mut rng),
        );
        let out_init = Init::Normal((1.0 / (d as f64 * 2.0 * config.layers.max(1) as f64)).sqrt());
        let blocks = (0..config.layers)
            .map(|l| {
                let name = |s: &str| format!("rx.block{l}.{s}");
                Block {
                    norm1: LayerNorm::new(&mut params, &name("norm1"), d),
                    query: Linear::new(&mut params, &name("query"), d, d, Init::Scaled, &mut rng),
                    key: Linear::new(&mut params, &name("key"), d, d, Init::Scaled, &mut rng),
                    value: Linear::new(&mut params, &name("value"), d, d, Init::Scaled, &mut rng),
                    out: Linear::new(&mut params, &name("out"), d, d, out_init, &mut rng),
                    norm2: LayerNorm::new(&mut params, &name("norm2"), d),
                    ff: Mlp::new(
                        &mut params,
                        &name("ff"),
                        &[d, config.ff_mult * d, d],
                        out_init,
                        &mut rng,
                    ),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut params, "rx.final_norm", d);
        let lm_head = params.add(
            "rx.lm_head",
            init_tensor(d, config.vocab, Init::Scaled, &mut rng),
        );
        let diffusion = DiffusionHead::new(
            &mut params,
            "rx.diffusion",
            config.token_width,
            d,
            config.head_hidden,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            token_embed,
            continuous_in,
            modality_embed,
            position_embed,
            blocks,
            final_norm,
            lm_head,
            diffusion,
            schedule,
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    /// `W_v: [D, V]`.
    pub fn lm_head_weight(&self) -> &Tensor {
        self.params.get(self.lm_head)
    }

    pub fn lm_head_weight_mut(&mut self) -> &mut Tensor {
        self.params.get_mut(self.lm_head)
    }

    fn check_sequence(&self, seq: &PackedSequence) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::invalid("empty sequence"));
        }
        if seq.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_len,
            });
        }
        if seq.vocab() > self.config.vocab || seq.width() != self.config.token_width {
            return Err(Error::shape(
                "packed sequence",
                &[seq.vocab(), seq.width()],
                &[self.config.vocab, self.config.token_width],
            ));
        }
        Ok(())
    }

    /// Token, modality and position embeddings for the stacked rows.
    fn embed(&self, g: &mut Graph<'_>, p: &Binding, seqs: &[&PackedSequence]) -> Result<Var> {
        let cfg = &self.config;
        let n: usize = seqs.iter().map(|s| s.len()).sum();
        let mut onehot = vec![0.0; n * cfg.vocab];
        let mut cont = vec![0.0; n * cfg.token_width];
        let mut modality = vec![0.0; n * 2];
        let mut positions = Vec::with_capacity(n);
        let mut row = 0;
        for s in seqs {
            for (i, item) in s.items().iter().enumerate() {
                match item {
                    Item::Discrete(id) => {
                        onehot[row * cfg.vocab + id] = 1.0;
                        modality[row * 2] = 1.0;
                    }
                    Item::Continuous(v) => {
                        cont[row * cfg.token_width..(row + 1) * cfg.token_width].copy_from_slice(v);
                        modality[row * 2 + 1] = 1.0;
                    }
                }
                positions.push(i);
                row += 1;
            }
        }
        let onehot = g.constant(vec![n, cfg.vocab], onehot)?;
        let cont = g.constant(vec![n, cfg.token_width], cont)?;
        let modality = g.constant(vec![n, 2], modality)?;
        let tok = g.matmul(onehot, p[self.token_embed])?;
        let cont = g.matmul(cont, p[self.continuous_in])?;
        let modality = g.matmul(modality, p[self.modality_embed])?;
        let pos = g.gather(p[self.position_embed], &positions)?;
        let x = g.add(tok, cont)?;
        let x = g.add(x, modality)?;
        g.add(x, pos)
    }

    /// Final-normalized hidden states `[Σ len, D]` for a stack of sequences.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        p: &Binding,
        seqs: &[&PackedSequence],
    ) -> Result<Var> {
        for s in seqs {
            self.check_sequence(s)?;
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let mut x = self.embed(g, p, seqs)?;
        for b in &self.blocks {
            let h = b.norm1.forward(g, p, x)?;
            let q = b.query.forward(g, p, h)?;
            let k = b.key.forward(g, p, h)?;
            let v = b.value.forward(g, p, h)?;
            let a = g.causal_attention(q, k, v, &lens, self.config.heads)?;
            let a = b.out.forward(g, p, a)?;
            x = g.add(x, a)?;
            let h = b.norm2.forward(g, p, x)?;
            let f = b.ff.forward(g, p, h)?;
            x = g.add(x, f)?;
        }
        self.final_norm.forward(g, p, x)
    }

    /// Hidden state per position.
    pub fn transformer_forward(&self, seq: &PackedSequence) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let h = self.forward_graph(&mut g, &p, &[seq])?;
        Ok((0..seq.len()).map(|i| g.row(h, i)).collect())
    }

    /// Last hidden state of each sequence.
    pub fn last_hidden(&self, seqs: &[&PackedSequence]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let h = self.forward_graph(&mut g, &p, seqs)?;
        let mut row = 0;
        Ok(seqs
            .iter()
            .map(|s| {
                row += s.len();
                g.row(h, row - 1)
            })
            .collect())
    }

    /// `softmax(h W_v)`.
    pub fn lm_probs(&self, h: &[f64]) -> Result<Vec<f64>> {
        lm_head(h, self.lm_head_weight())
    }

    /// Mean LM and diffusion losses over the targets of each sequence at
    /// positions `>= max(1, start)`.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_>,
        p: &Binding,
        batch: &[TrainingSequence],
        draws: &[DiffusionDraw],
    ) -> Result<ReceiverLossVars> {
        let seqs: Vec<&PackedSequence> = batch.iter().map(|b| &b.sequence).collect();
        let h = self.forward_graph(g, p, &seqs)?;
        let mut lm_rows = Vec::new();
        let mut lm_targets = Vec::new();
        let mut diff_rows = Vec::new();
        let mut diff_targets = Vec::new();
        let mut offset = 0;
        for b in batch {
            for i in b.loss_start.max(1)..b.sequence.len() {
                match &b.sequence.items()[i] {
                    Item::Discrete(id) => {
                        lm_rows.push(offset + i - 1);
                        lm_targets.push(*id);
                    }
                    Item::Continuous(v) => {
                        diff_rows.push(offset + i - 1);
                        diff_targets.push(v.clone());
                    }
                }
            }
            offset += b.sequence.len();
        }
        if draws.len() != diff_targets.len() {
            return Err(Error::shape(
                "diffusion draws",
                &[draws.len()],
                &[diff_targets.len()],
            ));
        }
        let lm = if lm_rows.is_empty() {
            None
        } else {
            let hs = g.gather(h, &lm_rows)?;
            let logits = g.matmul(hs, p[self.lm_head])?;
            Some(g.cross_entropy(logits, &lm_targets)?)
        };
        let diff = if diff_rows.is_empty() {
            None
        } else {
            let hs = g.gather(h, &diff_rows)?;
            Some(
                self.diffusion
                    .loss_graph(g, p, &diff_targets, hs, draws, &self.schedule)?,
            )
        };
        let total = match (lm, diff) {
            (None, None) => return Err(Error::invalid("no positions to predict")),
            (Some(l), None) => g.scale(l, self.config.lm_weight),
            (None, Some(d)) => g.scale(d, self.config.diff_weight),
            (Some(l), Some(d)) => {
                let a = g.scale(l, self.config.lm_weight);
                let b = g.scale(d, self.config.diff_weight);
                g.add(a, b)?
            }
        };
        Ok(ReceiverLossVars { total, lm, diff })
    }

    /// One diffusion draw per continuous target, in [`Receiver::loss_graph`] order.
    pub fn sample_draws<R: Rng + ?Sized>(
        &self,
        batch: &[TrainingSequence],
        rng: &mut R,
    ) -> Vec<DiffusionDraw> {
        let n: usize = batch.iter().map(TrainingSequence::continuous_targets).sum();
        (0..n)
            .map(|_| DiffusionDraw::sample(self.config.token_width, &self.schedule, rng))
            .collect()
    }

    /// Mean negative log-likelihood of the discrete positions from `start`.
    pub fn lm_loss(&self, seq: &PackedSequence, start: usize) -> Result<f64> {
        let batch = [TrainingSequence::new(seq.clone(), start)];
        if batch[0].discrete_targets() == 0 {
            return Err(Error::invalid(
                "lm_loss needs a discrete position with context",
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let draws = vec![
            DiffusionDraw {
                r: 1,
                eps: vec![0.0; self.config.token_width]
            };
            batch[0].continuous_targets()
        ];
        let vars = self.loss_graph(&mut g, &p, &batch, &draws)?;
        Ok(g.scalar(vars.lm.expect("discrete targets present")))
    }

    /// Diffusion loss of the continuous positions from `start` with fresh draws.
    pub fn diffusion_loss<R: Rng + ?Sized>(
        &self,
        seq: &PackedSequence,
        start: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let batch = [TrainingSequence::new(seq.clone(), start)];
        if batch[0].continuous_targets() == 0 {
            return Err(Error::invalid(
                "diffusion_loss needs a continuous position with context",
            ));
        }
        let draws = self.sample_draws(&batch, rng);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let vars = self.loss_graph(&mut g, &p, &batch, &draws)?;
        Ok(g.scalar(vars.diff.expect("continuous targets present")))
    }

    /// Forward-only `(lm, diff)` losses of a batch.
    pub fn batch_losses(
        &self,
        batch: &[TrainingSequence],
        draws: &[DiffusionDraw],
    ) -> Result<(Option<f64>, Option<f64>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let vars = self.loss_graph(&mut g, &p, batch, draws)?;
        Ok((vars.lm.map(|v| g.scalar(v)), vars.diff.map(|v| g.scalar(v))))
    }

    /// Ancestral sample of one continuous token given its condition `h`.
    pub fn diffusion_sample<R: Rng + ?Sized>(
        &self,
        h: &[f64],
        mode: SamplingNoise,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        Ok(self
            .diffusion
            .sample_many(&self.params, h, 1, &self.schedule, mode, rng)?
            .remove(0))
    }
}

/// `softmax(h W_v)` for `W_v: [D, V]`.
pub fn lm_head(h: &[f64], w: &Tensor) -> Result<Vec<f64>> {
    let (d, v) = match *w.shape() {
        [d, v] => (d, v),
        _ => return Err(Error::shape("lm_head", w.shape(), &[h.len(), 0])),
    };
    if h.len() != d {
        return Err(Error::shape("lm_head", &[h.len()], &[d]));
    }
    let mut logits = vec![0.0; v];
    for (hv, row) in h.iter().zip(w.data().chunks(v)) {
        for (l, wv) in logits.iter_mut().zip(row) {
            *l += hv * wv;
        }
    }
    Ok(crate::autodiff::softmax_row(&logits))
}

#[cfg(test)]
mod tests;
