//! σ-GenIB tokenizer and de-tokenizer.
//!
//! The encoder maps a source sample to the deterministic latent `μ`; the
//! stochastic latent is `t = μ + σ ⊙ ε` with a fixed, per-model `σ`. A learned
//! variance mode (the VAE baseline) lets the encoder emit `log σ²` instead.

mod fit;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, ParamStore, Var};
use crate::channel::{CodedChannel, Coder, FrameDraw, IdentityChannel, LatentChannel};
use crate::error::{Error, Result};
use crate::nn::{mse, running_mean, Init, Mlp};
use crate::rng::{normal, rng_from_seed, SeedTree, Stream};

pub use fit::{train_tokenizer, variance_profile, ChannelSchedule, EpochTrace, VarianceProfile};

/// Lower clamp on drawn σ entries, also the variance-collapse threshold.
pub const SIGMA_FLOOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Discrete,
    Continuous,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Discrete => "discrete",
            Modality::Continuous => "continuous",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Discrete(Vec<usize>),
    Continuous(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Discrete(v) => v.len(),
            Payload::Continuous(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality(&self) -> Modality {
        match self {
            Payload::Discrete(_) => Modality::Discrete,
            Payload::Continuous(_) => Modality::Continuous,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSample {
    pub payload: Payload,
}

impl SourceSample {
    pub fn discrete(ids: Vec<usize>) -> Self {
        Self {
            payload: Payload::Discrete(ids),
        }
    }

    pub fn continuous(values: Vec<f64>) -> Self {
        Self {
            payload: Payload::Continuous(values),
        }
    }

    pub fn modality(&self) -> Modality {
        self.payload.modality()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `|N(0, C_σ)|` clamped at [`SIGMA_FLOOR`], drawn once and frozen.
    #[default]
    Frozen,
    /// `σ_d = √C_σ` for every dimension.
    Constant,
    /// A fresh frozen-style draw for every training batch.
    Redraw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    #[default]
    Fixed,
    /// VAE baseline: the encoder also outputs `log σ²`.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub modality: Modality,
    /// Payload length `L_m`.
    pub input_len: usize,
    /// Source alphabet size; discrete payloads only.
    pub alphabet: usize,
    /// Number of latent tokens `S_m`.
    pub tokens: usize,
    /// Reals per latent token.
    pub token_width: usize,
    pub xi: f64,
    pub lambda: f64,
    /// Monte Carlo draws `K`.
    pub samples: usize,
    pub c_sigma: f64,
    pub sigma_mode: SigmaMode,
    pub variance: VarianceMode,
    /// Hidden width; defaults to four times the latent width.
    pub hidden: Option<usize>,
    /// Single affine layer in each direction instead of the three-block MLP.
    pub linear: bool,
    /// Forces every ε draw to zero.
    pub zero_eps: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            modality: Modality::Continuous,
            input_len: 16,
            alphabet: 0,
            tokens: 4,
            token_width: 1,
            xi: 1e-3,
            lambda: 0.5,
            samples: 4,
            c_sigma: 0.25,
            sigma_mode: SigmaMode::Frozen,
            variance: VarianceMode::Fixed,
            hidden: None,
            linear: false,
            zero_eps: false,
        }
    }
}

impl TokenizerConfig {
    pub fn continuous(input_len: usize, tokens: usize) -> Self {
        Self {
            input_len,
            tokens,
            ..Self::default()
        }
    }

    pub fn discrete(input_len: usize, alphabet: usize, tokens: usize) -> Self {
        Self {
            modality: Modality::Discrete,
            input_len,
            alphabet,
            tokens,
            ..Self::default()
        }
    }

    /// Length of `μ`: `S_m · token_width`.
    pub fn latent_dim(&self) -> usize {
        self.tokens * self.token_width
    }

    /// Width of the encoder input and the decoder output.
    pub fn source_dim(&self) -> usize {
        match self.modality {
            Modality::Discrete => self.input_len * self.alphabet,
            Modality::Continuous => self.input_len,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.unwrap_or(4 * self.latent_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("tokenizer: {m}")));
        if self.input_len == 0 || self.tokens == 0 || self.token_width == 0 {
            return bad("input_len, tokens and token_width must be positive");
        }
        if self.modality == Modality::Discrete && self.alphabet < 2 {
            return bad("discrete sources need an alphabet of at least 2");
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return bad("xi must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.samples == 0 {
            return bad("samples (K) must be at least 1");
        }
        if !(self.c_sigma > 0.0 && self.c_sigma.is_finite()) {
            return bad("c_sigma must be positive");
        }
        if self.hidden == Some(0) {
            return bad("hidden width must be positive");
        }
        Ok(())
    }
}

/// `|N(0, C_σ)|` per dimension, clamped below at [`SIGMA_FLOOR`].
pub fn draw_sigma<R: Rng + ?Sized>(dim: usize, c_sigma: f64, rng: &mut R) -> Vec<f64> {
    let std = c_sigma.sqrt();
    (0..dim)
        .map(|_| (std * normal(rng)).abs().max(SIGMA_FLOOR))
        .collect()
}

/// `t_k = μ + σ ⊙ ε_k` for `k = 1..K`.
pub fn reparameterize<R: Rng + ?Sized>(
    mu: &[f64],
    sigma: &[f64],
    rng: &mut R,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::invalid("reparameterize needs at least one draw"));
    }
    if mu.len() != sigma.len() {
        return Err(Error::shape("reparameterize", &[mu.len()], &[sigma.len()]));
    }
    Ok((0..k)
        .map(|_| {
            mu.iter()
                .zip(sigma)
                .map(|(m, s)| m + s * normal(rng))
                .collect()
        })
        .collect())
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²)`.
pub fn kl_to_standard_normal(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::shape("kl", &[mu.len()], &[sigma.len()]));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::invalid(format!("kl needs positive sigma, got {s}")));
    }
    Ok(0.5
        * mu.iter()
            .zip(sigma)
            .map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln())
            .sum::<f64>())
}

/// Standard-normal draws for one loss evaluation: `K` matrices of shape
/// `[rows, latent_dim]`, plus the σ they scale.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraws {
    pub rows: usize,
    pub dim: usize,
    pub eps: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
}

impl NoiseDraws {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, k: usize, rows: usize, sigma: Vec<f64>) -> Self {
        let dim = sigma.len();
        let eps = (0..k)
            .map(|_| (0..rows * dim).map(|_| normal(rng)).collect())
            .collect();
        Self {
            rows,
            dim,
            eps,
            sigma,
        }
    }

    pub fn zeros(k: usize, rows: usize, sigma: Vec<f64>) -> Self {
        let dim = sigma.len();
        Self {
            rows,
            dim,
            eps: vec![vec![0.0; rows * dim]; k],
            sigma,
        }
    }
}

/// Decoder output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Reconstruction {
    Continuous(Vec<f64>),
    /// Row-major `len × alphabet` logits.
    Logits {
        len: usize,
        alphabet: usize,
        data: Vec<f64>,
    },
}

impl Reconstruction {
    /// Argmax id per position, ties to the lowest id.
    pub fn ids(&self) -> Option<Vec<usize>> {
        match self {
            Reconstruction::Continuous(_) => None,
            Reconstruction::Logits { alphabet, data, .. } => Some(
                data.chunks(*alphabet)
                    .map(|row| {
                        let mut best = 0;
                        for (i, v) in row.iter().enumerate() {
                            if *v > row[best] {
                                best = i;
                            }
                        }
                        best
                    })
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub kl: f64,
    pub stochastic: f64,
    pub deterministic: f64,
}

/// Graph nodes of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub kl: Var,
    pub stochastic: Var,
    pub deterministic: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph<'_>) -> LossBreakdown {
        LossBreakdown {
            total: g.scalar(self.total),
            kl: g.scalar(self.kl),
            stochastic: g.scalar(self.stochastic),
            deterministic: g.scalar(self.deterministic),
        }
    }
}

/// How latents reach the de-tokenizer inside the loss.
pub enum LossChannel<'c> {
    Identity,
    Coded {
        coder: &'c Coder,
        frames: Vec<FrameDraw>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub params: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
    sigma: Vec<f64>,
    sigma_seed: u64,
}

impl Tokenizer {
    /// Weights come from the `Init` stream of `seed`, σ from a derived seed
    /// that is recorded alongside it.
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let seeds = SeedTree::new(seed);
        let mut rng = seeds.rng(Stream::Init, 0);
        let sigma_seed = seeds.seed(Stream::Init, 1);
        let d = config.latent_dim();
        let enc_out = match config.variance {
            VarianceMode::Fixed => d,
            VarianceMode::Learned => 2 * d,
        };
        let h = config.hidden_dim();
        let (enc_dims, dec_dims) = if config.linear {
            (
                vec![config.source_dim(), enc_out],
                vec![d, config.source_dim()],
            )
        } else {
            (
                vec![config.source_dim(), h, h, enc_out],
                vec![d, h, h, config.source_dim()],
            )
        };
        let mut params = ParamStore::new();
        let encoder = Mlp::new(
            &mut params,
            "tokenizer.enc",
            &enc_dims,
            Init::Scaled,
            &mut rng,
        );
        let decoder = Mlp::new(
            &mut params,
            "tokenizer.dec",
            &dec_dims,
            Init::Scaled,
            &mut rng,
        );
        let sigma = match config.sigma_mode {
            SigmaMode::Frozen | SigmaMode::Redraw => {
                draw_sigma(d, config.c_sigma, &mut rng_from_seed(sigma_seed))
            }
            SigmaMode::Constant => vec![config.c_sigma.sqrt(); d],
        };
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            sigma,
            sigma_seed,
        })
    }

    /// The fixed scale vector. Unused by the learned-variance mode.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sigma_seed(&self) -> u64 {
        self.sigma_seed
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// Encoder input rows: one-hot blocks for discrete payloads, raw values otherwise.
    pub fn input_rows(&self, batch: &[&SourceSample]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let mut out = Vec::with_capacity(batch.len() * cfg.source_dim());
        for s in batch {
            if s.payload.len() != cfg.input_len {
                return Err(Error::shape(
                    "tokenizer input",
                    &[s.payload.len()],
                    &[cfg.input_len],
                ));
            }
            match (&s.payload, cfg.modality) {
                (Payload::Discrete(ids), Modality::Discrete) => {
                    for &id in ids {
                        if id >= cfg.alphabet {
                            return Err(Error::TokenOutOfRange {
                                id,
                                vocab: cfg.alphabet,
                            });
                        }
                        let mut row = vec![0.0; cfg.alphabet];
                        row[id] = 1.0;
                        out.extend(row);
                    }
                }
                (Payload::Continuous(v), Modality::Continuous) => out.extend(v),
                _ => {
                    return Err(Error::invalid(
                        "payload modality does not match the tokenizer",
                    ))
                }
            }
        }
        Ok(out)
    }

    /// Returns `(μ, log σ²)`; the second is present only in learned-variance mode.
    pub fn encode_graph(
        &self,
        g: &mut Graph<'_>,
        p: &Binding,
        x: Var,
    ) -> Result<(Var, Option<Var>)> {
        let out = self.encoder.forward(g, p, x)?;
        let d = self.latent_dim();
        match self.config.variance {
            VarianceMode::Fixed => Ok((out, None)),
            VarianceMode::Learned => {
                let mu = g.slice_cols(out, 0, d)?;
                let logvar = g.slice_cols(out, d, 2 * d)?;
                Ok((mu, Some(logvar)))
            }
        }
    }

    pub fn decode_graph(&self, g: &mut Graph<'_>, p: &Binding, t: Var) -> Result<Var> {
        self.decoder.forward(g, p, t)
    }

    /// Per-element mean distortion: cross-entropy over positions for discrete
    /// payloads, squared error for continuous ones.
    pub fn distortion_graph(
        &self,
        g: &mut Graph<'_>,
        recon: Var,
        batch: &[&SourceSample],
    ) -> Result<Var> {
        match self.config.modality {
            Modality::Discrete => {
                let rows = batch.len() * self.config.input_len;
                let logits = g.reshape(recon, vec![rows, self.config.alphabet])?;
                let mut targets = Vec::with_capacity(rows);
                for s in batch {
                    match &s.payload {
                        Payload::Discrete(ids) => targets.extend(ids),
                        Payload::Continuous(_) => {
                            return Err(Error::invalid(
                                "payload modality does not match the tokenizer",
                            ))
                        }
                    }
                }
                g.cross_entropy(logits, &targets)
            }
            Modality::Continuous => {
                let x = self.input_rows(batch)?;
                let x = g.constant(vec![batch.len(), self.config.input_len], x)?;
                mse(g, recon, x)
            }
        }
    }

    /// Per-row mean of the KL to the standard-normal prior.
    fn kl_graph(&self, g: &mut Graph<'_>, mu: Var, logvar: Option<Var>) -> Result<Var> {
        let rows = g.shape(mu)[0] as f64;
        let mu2 = g.square(mu);
        match logvar {
            None => {
                let c: f64 = self.sigma.iter().map(|s| s * s - 1.0 - (s * s).ln()).sum();
                let s = g.sum(mu2);
                let s = g.scale(s, 0.5 / rows);
                Ok(g.add_scalar(s, 0.5 * c))
            }
            Some(lv) => {
                let var = g.exp(lv);
                let a = g.add(mu2, var)?;
                let a = g.sub(a, lv)?;
                let a = g.add_scalar(a, -1.0);
                let s = g.sum(a);
                Ok(g.scale(s, 0.5 / rows))
            }
        }
    }

    /// Builds `ξ·KL + λ·(1/K)Σ_k D(dec(chan(t_k)), x) + (1−λ)·D(dec(chan(μ)), x)`.
    ///
    /// An all-zero ε draw reuses the `μ` branch node, so the stochastic and
    /// deterministic terms are then the same value bit for bit.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_>,
        p: &Binding,
        batch: &[&SourceSample],
        draws: &NoiseDraws,
        channel: &dyn LatentChannel,
    ) -> Result<LossVars> {
        let rows = batch.len();
        let d = self.latent_dim();
        if draws.rows != rows || draws.dim != d || draws.eps.is_empty() {
            return Err(Error::shape(
                "noise draws",
                &[draws.rows, draws.dim],
                &[rows, d],
            ));
        }
        let x = self.input_rows(batch)?;
        let x = g.constant(vec![rows, self.config.source_dim()], x)?;
        let (mu, logvar) = self.encode_graph(g, p, x)?;
        let kl = self.kl_graph(g, mu, logvar)?;

        let received_mu = channel.apply(g, mu)?;
        let recon_mu = self.decode_graph(g, p, received_mu)?;
        let deterministic = self.distortion_graph(g, recon_mu, batch)?;

        let std = match logvar {
            Some(lv) => {
                let half = g.scale(lv, 0.5);
                Some(g.exp(half))
            }
            None => None,
        };
        let mut terms = Vec::with_capacity(draws.eps.len());
        for eps in &draws.eps {
            if eps.iter().all(|e| *e == 0.0) {
                terms.push(deterministic);
                continue;
            }
            let noise = match std {
                None => {
                    let scaled = eps
                        .chunks(d)
                        .flat_map(|row| row.iter().zip(&draws.sigma).map(|(e, s)| e * s))
                        .collect();
                    g.constant(vec![rows, d], scaled)?
                }
                Some(std) => {
                    let e = g.constant(vec![rows, d], eps.clone())?;
                    g.mul(std, e)?
                }
            };
            let t = g.add(mu, noise)?;
            let received = channel.apply(g, t)?;
            let recon = self.decode_graph(g, p, received)?;
            terms.push(self.distortion_graph(g, recon, batch)?);
        }
        let stochastic = running_mean(g, &terms)?;

        let lambda = self.config.lambda;
        let a = g.scale(kl, self.config.xi);
        let b = g.scale(stochastic, lambda);
        let c = g.scale(deterministic, 1.0 - lambda);
        let total = g.add(a, b)?;
        let total = g.add(total, c)?;
        Ok(LossVars {
            total,
            kl,
            stochastic,
            deterministic,
        })
    }

    /// Evaluates the σ-GenIB loss on a batch without training.
    pub fn sigma_genib_loss(
        &self,
        batch: &[SourceSample],
        draws: &NoiseDraws,
        channel: &LossChannel<'_>,
    ) -> Result<LossBreakdown> {
        let refs: Vec<&SourceSample> = batch.iter().collect();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let vars = match channel {
            LossChannel::Identity => self.loss_graph(&mut g, &p, &refs, draws, &IdentityChannel)?,
            LossChannel::Coded { coder, frames } => {
                let cp = coder.params.bind(&mut g);
                let chan = CodedChannel::new(coder, cp, frames.clone());
                self.loss_graph(&mut g, &p, &refs, draws, &chan)?
            }
        };
        Ok(vars.values(&g))
    }

    /// Draws matching this model's config: zeros when `zero_eps` is set, and
    /// a fresh σ in redraw mode.
    pub fn noise_draws<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> NoiseDraws {
        let k = self.config.samples;
        let sigma = match self.config.sigma_mode {
            SigmaMode::Redraw => draw_sigma(self.latent_dim(), self.config.c_sigma, rng),
            _ => self.sigma.clone(),
        };
        if self.config.zero_eps {
            NoiseDraws::zeros(k, rows, sigma)
        } else {
            NoiseDraws::sample(rng, k, rows, sigma)
        }
    }

    /// `μ` and the posterior standard deviation for each sample.
    pub fn posterior(&self, batch: &[SourceSample]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&SourceSample> = batch.iter().collect();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = self.input_rows(&refs)?;
        let x = g.constant(vec![batch.len(), self.config.source_dim()], x)?;
        let (mu, logvar) = self.encode_graph(&mut g, &p, x)?;
        let out: Vec<_> = (0..batch.len())
            .map(|r| {
                let m = g.row(mu, r);
                let s = match logvar {
                    Some(lv) => g.row(lv, r).iter().map(|v| (0.5 * v).exp()).collect(),
                    None => self.sigma.clone(),
                };
                (m, s)
            })
            .collect();
        if out.iter().any(|(m, _)| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(out)
    }

    /// Deterministic representation `μ = F_α(x)`.
    pub fn encode(&self, x: &SourceSample) -> Result<Vec<f64>> {
        Ok(self.posterior(std::slice::from_ref(x))?.remove(0).0)
    }

    pub fn encode_batch(&self, batch: &[SourceSample]) -> Result<Vec<Vec<f64>>> {
        Ok(self.posterior(batch)?.into_iter().map(|(m, _)| m).collect())
    }

    pub fn decode_batch(&self, latents: &[Vec<f64>]) -> Result<Vec<Reconstruction>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.latent_dim();
        if let Some(t) = latents.iter().find(|t| t.len() != d) {
            return Err(Error::shape("decode", &[t.len()], &[d]));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let t = g.constant(vec![latents.len(), d], latents.concat())?;
        let y = self.decode_graph(&mut g, &p, t)?;
        if g.value(y).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder output".into()));
        }
        let cfg = &self.config;
        Ok((0..latents.len())
            .map(|r| {
                let row = g.row(y, r);
                match cfg.modality {
                    Modality::Continuous => Reconstruction::Continuous(row),
                    Modality::Discrete => Reconstruction::Logits {
                        len: cfg.input_len,
                        alphabet: cfg.alphabet,
                        data: row,
                    },
                }
            })
            .collect())
    }

    pub fn decode(&self, t: &[f64]) -> Result<Reconstruction> {
        Ok(self.decode_batch(&[t.to_vec()])?.remove(0))
    }
}

#[cfg(test)]
mod tests;
