//! Trainable joint coding-modulation pair and the differentiable channel
//! used for channel-in-the-loop training.
//!
//! The encoder maps a latent row plus an SNR feature to `2N - 2` reals, appends
//! a unit pilot symbol, and normalizes the frame to mean power `P`. The
//! decoder equalizes, estimates the normalization gain from the pilot,
//! undoes it with a regularized inverse `ĝ / (ĝ² + σ_n²/P)`, and maps the data
//! reals (plus the SNR feature) back to a latent row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{equalizer_coefficient, noise_variance, ChannelRealization, ComplexSignal, Equalizer};
use crate::autodiff::{Binding, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoderMode {
    /// affine -> gelu -> affine in each direction.
    #[default]
    Neural,
    /// A single identity-initialized affine map in each direction.
    Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoderConfig {
    pub latent_dim: usize,
    pub bandwidth_ratio: f64,
    pub power: f64,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub mode: CoderMode,
    #[serde(default)]
    pub equalizer: Equalizer,
    /// SNR values outside this range are clamped before use as a feature.
    pub snr_feature_range_db: (f64, f64),
}

impl CoderConfig {
    pub fn new(latent_dim: usize, bandwidth_ratio: f64) -> Self {
        Self {
            latent_dim,
            bandwidth_ratio,
            power: 1.0,
            hidden: None,
            mode: CoderMode::Neural,
            equalizer: Equalizer::Mmse,
            snr_feature_range_db: (0.0, 20.0),
        }
    }

    /// `N = ceil(S · ratio / 2)` complex symbols per frame, pilot included.
    pub fn symbols(&self) -> usize {
        ((self.latent_dim as f64 * self.bandwidth_ratio) / 2.0).ceil() as usize
    }

    fn data_reals(&self) -> usize {
        2 * self.symbols() - 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || !(self.bandwidth_ratio > 0.0) || !(self.power > 0.0) {
            return Err(Error::invalid(
                "coder needs latent_dim >= 1, bandwidth_ratio > 0 and power > 0",
            ));
        }
        if self.symbols() < 2 {
            return Err(Error::invalid(format!(
                "latent_dim {} at bandwidth ratio {} leaves no room for data next to the pilot",
                self.latent_dim, self.bandwidth_ratio
            )));
        }
        if self.mode == CoderMode::Affine && self.data_reals() < self.latent_dim {
            return Err(Error::invalid(
                "affine coder needs 2N - 2 >= latent_dim (use bandwidth_ratio >= 2)",
            ));
        }
        let (lo, hi) = self.snr_feature_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(
                "snr_feature_range_db must be a finite, ordered pair",
            ));
        }
        Ok(())
    }

    pub fn snr_feature(&self, snr_db: f64) -> f64 {
        let (lo, hi) = self.snr_feature_range_db;
        snr_db.clamp(lo, hi) / 20.0
    }
}

/// One frame's channel draw: gain and the exact noise vector added.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDraw {
    pub realization: ChannelRealization,
    /// Interleaved noise, `2N` reals.
    pub noise: Vec<f64>,
}

impl FrameDraw {
    pub fn sample<R: Rng + ?Sized>(
        realization: ChannelRealization,
        symbols: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            noise: super::sample_noise(symbols, realization.noise_var, rng),
            realization,
        }
    }

    pub fn noiseless(symbols: usize) -> Self {
        Self {
            realization: ChannelRealization::noiseless(),
            noise: vec![0.0; 2 * symbols],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coder {
    pub config: CoderConfig,
    pub params: ParamStore,
    encoder: Vec<Linear>,
    decoder: Vec<Linear>,
}

impl Coder {
    pub fn new<R: Rng + ?Sized>(config: CoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let s = config.latent_dim;
        let d = config.data_reals();
        let mut params = ParamStore::new();
        let (encoder, decoder) = match config.mode {
            CoderMode::Neural => {
                let h = config.hidden.unwrap_or(2 * s.max(d));
                (
                    vec![
                        Linear::new(&mut params, "coder.enc.0", s + 1, h, Init::Scaled, rng),
                        Linear::new(&mut params, "coder.enc.1", h, d, Init::Scaled, rng),
                    ],
                    vec![
                        Linear::new(&mut params, "coder.dec.0", d + 1, h, Init::Scaled, rng),
                        Linear::new(&mut params, "coder.dec.1", h, s, Init::Scaled, rng),
                    ],
                )
            }
            CoderMode::Affine => {
                let enc = Linear::new(&mut params, "coder.enc.0", s + 1, d, Init::Identity, rng);
                let dec = Linear::new(&mut params, "coder.dec.0", d + 1, s, Init::Identity, rng);
                // The SNR feature row starts disconnected.
                params.get_mut(enc.weight).data_mut()[s * d..].fill(0.0);
                params.get_mut(dec.weight).data_mut()[d * s..].fill(0.0);
                (vec![enc], vec![dec])
            }
        };
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn symbols(&self) -> usize {
        self.config.symbols()
    }

    fn stack(g: &mut Graph<'_>, p: &Binding, layers: &[Linear], mut x: Var) -> Result<Var> {
        for (i, layer) in layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i + 1 < layers.len() {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }

    fn snr_column(&self, g: &mut Graph<'_>, snr_db: &[f64]) -> Result<Var> {
        let col = snr_db.iter().map(|&s| self.config.snr_feature(s)).collect();
        g.constant(vec![snr_db.len(), 1], col)
    }

    /// Latent rows `[B, S]` to power-normalized interleaved frames `[B, 2N]`.
    pub fn encode_graph(
        &self,
        g: &mut Graph<'_>,
        p: &Binding,
        t: Var,
        snr_db: &[f64],
    ) -> Result<Var> {
        let rows = g.shape(t)[0];
        if g.shape(t) != [rows, self.config.latent_dim] || snr_db.len() != rows {
            return Err(Error::shape(
                "jscc_encode",
                g.shape(t),
                &[snr_db.len(), self.config.latent_dim],
            ));
        }
        let snr = self.snr_column(g, snr_db)?;
        let x = g.concat_cols(&[t, snr])?;
        let data = Self::stack(g, p, &self.encoder, x)?;
        let pilot = g.constant(vec![rows, 2], [1.0, 0.0].repeat(rows))?;
        let frame = g.concat_cols(&[data, pilot])?;
        power_normalize_rows(g, frame, self.config.power)
    }

    /// Equalized frames `[B, 2N]` back to latent rows `[B, S]`.
    pub fn decode_graph(
        &self,
        g: &mut Graph<'_>,
        p: &Binding,
        z: Var,
        snr_db: &[f64],
    ) -> Result<Var> {
        let rows = g.shape(z)[0];
        let n2 = 2 * self.symbols();
        if g.shape(z) != [rows, n2] || snr_db.len() != rows {
            return Err(Error::shape("jscc_decode", g.shape(z), &[snr_db.len(), n2]));
        }
        let gain = g.slice_cols(z, n2 - 2, n2 - 1)?;
        let delta: Vec<f64> = snr_db
            .iter()
            .map(|&s| (noise_variance(s, self.config.power) / self.config.power).max(1e-24))
            .collect();
        let delta = g.constant(vec![rows, 1], delta)?;
        let g2 = g.square(gain);
        let denom = g.add(g2, delta)?;
        let denom = g.powf(denom, -1.0);
        let inv = g.mul(gain, denom)?;
        let inv = g.tile_cols(inv, n2 - 2)?;
        let data = g.slice_cols(z, 0, n2 - 2)?;
        let data = g.mul(data, inv)?;
        let snr = self.snr_column(g, snr_db)?;
        let x = g.concat_cols(&[data, snr])?;
        Self::stack(g, p, &self.decoder, x)
    }

    /// Single-frame `T(t)`.
    pub fn jscc_encode(&self, t: &[f64], snr_db: f64) -> Result<ComplexSignal> {
        if t.len() != self.config.latent_dim {
            return Err(Error::shape(
                "jscc_encode",
                &[t.len()],
                &[self.config.latent_dim],
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(vec![1, t.len()], t.to_vec())?;
        let z = self.encode_graph(&mut g, &p, x, &[snr_db])?;
        ComplexSignal::from_interleaved(g.value(z), self.config.power)
    }

    /// Single-frame `R(ẑ)`; `z_hat` is expected to be equalized already.
    pub fn jscc_decode(&self, z_hat: &ComplexSignal, snr_db: f64) -> Result<Vec<f64>> {
        if z_hat.len() != self.symbols() {
            return Err(Error::shape(
                "jscc_decode",
                &[z_hat.len()],
                &[self.symbols()],
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let z = g.constant(vec![1, 2 * z_hat.len()], z_hat.to_interleaved())?;
        let t = self.decode_graph(&mut g, &p, z, &[snr_db])?;
        Ok(g.value(t).to_vec())
    }

    /// Full chain for a batch of latent rows without gradient tracking.
    pub fn transmit_latents(
        &self,
        latents: &[Vec<f64>],
        frames: &[FrameDraw],
    ) -> Result<Vec<Vec<f64>>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let s = self.config.latent_dim;
        let t = g.constant(vec![latents.len(), s], latents.concat())?;
        let chan = CodedChannel::new(self, p, frames.to_vec());
        let out = chan.apply(&mut g, t)?;
        Ok(g.value(out).chunks(s).map(<[f64]>::to_vec).collect())
    }
}

/// Per-row `z · sqrt(P·N / ‖z‖²)` for interleaved frames `[B, 2N]`.
pub fn power_normalize_rows(g: &mut Graph<'_>, z: Var, power: f64) -> Result<Var> {
    let n2 = g.shape(z)[1];
    let sq = g.square(z);
    let energy = g.sum_rows(sq)?;
    let per_budget = g.scale(energy, 2.0 / (power * n2 as f64));
    let factor = g.powf(per_budget, -0.5);
    let factor = g.tile_cols(factor, n2)?;
    g.mul(z, factor)
}

/// Multiplies each interleaved row by its own complex scalar.
fn complex_scale_rows(g: &mut Graph<'_>, z: Var, coeffs: &[(f64, f64)]) -> Result<Var> {
    let (rows, n2) = (g.shape(z)[0], g.shape(z)[1]);
    let pairs = g.reshape(z, vec![rows * n2 / 2, 2])?;
    let re = g.slice_cols(pairs, 0, 1)?;
    let im = g.slice_cols(pairs, 1, 2)?;
    let swapped = g.concat_cols(&[im, re])?;
    let swapped = g.reshape(swapped, vec![rows, n2])?;
    let mut real_part = Vec::with_capacity(rows * n2);
    let mut cross = Vec::with_capacity(rows * n2);
    for &(cr, ci) in coeffs {
        for _ in 0..n2 / 2 {
            real_part.extend([cr, cr]);
            cross.extend([-ci, ci]);
        }
    }
    let real_part = g.constant(vec![rows, n2], real_part)?;
    let cross = g.constant(vec![rows, n2], cross)?;
    let a = g.mul(z, real_part)?;
    let b = g.mul(swapped, cross)?;
    g.add(a, b)
}

/// Maps a batch of latent rows to what the receiver recovers after the channel.
pub trait LatentChannel {
    fn apply(&self, g: &mut Graph<'_>, t: Var) -> Result<Var>;
}

/// Passes latents through untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityChannel;

impl LatentChannel for IdentityChannel {
    fn apply(&self, _g: &mut Graph<'_>, t: Var) -> Result<Var> {
        Ok(t)
    }
}

/// Encoder, physical channel, equalizer and decoder, with one fixed
/// [`FrameDraw`] per batch row. Every call reuses the same draws.
pub struct CodedChannel<'c> {
    coder: &'c Coder,
    binding: Binding,
    frames: Vec<FrameDraw>,
}

impl<'c> CodedChannel<'c> {
    /// `binding` must come from `coder.params.bind` on the graph later passed to `apply`.
    pub fn new(coder: &'c Coder, binding: Binding, frames: Vec<FrameDraw>) -> Self {
        Self {
            coder,
            binding,
            frames,
        }
    }

    pub fn frames(&self) -> &[FrameDraw] {
        &self.frames
    }
}

impl LatentChannel for CodedChannel<'_> {
    fn apply(&self, g: &mut Graph<'_>, t: Var) -> Result<Var> {
        let rows = g.shape(t)[0];
        if rows != self.frames.len() {
            return Err(Error::shape(
                "coded channel",
                g.shape(t),
                &[self.frames.len()],
            ));
        }
        let cfg = &self.coder.config;
        let snr: Vec<f64> = self.frames.iter().map(|f| f.realization.snr_db).collect();
        let z = self.coder.encode_graph(g, &self.binding, t, &snr)?;
        let gains: Vec<(f64, f64)> = self
            .frames
            .iter()
            .map(|f| (f.realization.h_re, f.realization.h_im))
            .collect();
        let faded = complex_scale_rows(g, z, &gains)?;
        let noise: Vec<f64> = self
            .frames
            .iter()
            .flat_map(|f| f.noise.iter().copied())
            .collect();
        let noise = g.constant(g.shape(faded).to_vec(), noise)?;
        let received = g.add(faded, noise)?;
        let eq = self
            .frames
            .iter()
            .map(|f| equalizer_coefficient(&f.realization, cfg.power, cfg.equalizer))
            .collect::<Result<Vec<_>>>()?;
        let equalized = complex_scale_rows(g, received, &eq)?;
        self.coder.decode_graph(g, &self.binding, equalized, &snr)
    }
}
