//! Per-token DDPM: schedule, forward noising, ε-prediction loss and
//! ancestral sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{mse, Init, Mlp};
use crate::rng::{normal_vec, SeedTree, Stream};
use crate::train::{check_divergence, epoch_batches, TrainConfig};

/// Width of the sinusoidal timestep embedding.
pub const TIME_EMBED_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    phi: Vec<f64>,
    omega: Vec<f64>,
}

impl DiffusionSchedule {
    /// `ω_r = ∏_{i ≤ r} (1 − φ_i)`.
    pub fn new(phi: Vec<f64>) -> Result<Self> {
        if phi.is_empty() {
            return Err(Error::invalid("diffusion schedule needs at least one step"));
        }
        if let Some(p) = phi.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::invalid(format!("phi must lie in (0, 1), got {p}")));
        }
        let omega = cumulative(&phi);
        Ok(Self { phi, omega })
    }

    /// `R` steps with `φ` spaced linearly from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let phi = match steps {
            0 => Vec::new(),
            1 => vec![start],
            _ => (0..steps)
                .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        Self::new(phi)
    }

    pub fn steps(&self) -> usize {
        self.phi.len()
    }

    /// `φ_r` for `r` in `1..=R`.
    pub fn phi(&self, r: usize) -> f64 {
        self.phi[r - 1]
    }

    /// `ω_r` for `r` in `1..=R`.
    pub fn omega(&self, r: usize) -> f64 {
        self.omega[r - 1]
    }

    pub fn phis(&self) -> &[f64] {
        &self.phi
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omega
    }

    fn check_step(&self, r: usize) -> Result<()> {
        if r == 0 || r > self.steps() {
            return Err(Error::invalid(format!(
                "diffusion step {r} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

fn cumulative(phi: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    phi.iter()
        .map(|p| {
            acc *= 1.0 - p;
            acc
        })
        .collect()
}

/// `c_r = √ω_r c0 + √(1 − ω_r) ε` for a given `ε`.
pub fn diffusion_forward_with(
    c0: &[f64],
    r: usize,
    schedule: &DiffusionSchedule,
    eps: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_step(r)?;
    if eps.len() != c0.len() {
        return Err(Error::shape("diffusion_forward", &[c0.len()], &[eps.len()]));
    }
    let w = schedule.omega(r);
    let (a, b) = (w.sqrt(), (1.0 - w).sqrt());
    Ok(c0.iter().zip(eps).map(|(c, e)| a * c + b * e).collect())
}

/// Samples `ε ~ N(0, I)` and returns `(c_r, ε)`.
pub fn diffusion_forward<R: Rng + ?Sized>(
    c0: &[f64],
    r: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    schedule.check_step(r)?;
    let eps = normal_vec(rng, c0.len());
    Ok((diffusion_forward_with(c0, r, schedule, &eps)?, eps))
}

/// One-step estimate `(c_r − √(1 − ω_r) ε̂) / √ω_r`.
pub fn predict_x0(
    c_r: &[f64],
    eps_hat: &[f64],
    r: usize,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    schedule.check_step(r)?;
    let w = schedule.omega(r);
    let (a, b) = (w.sqrt(), (1.0 - w).sqrt());
    Ok(c_r
        .iter()
        .zip(eps_hat)
        .map(|(c, e)| (c - b * e) / a)
        .collect())
}

/// `[sin(r f_0) .. sin(r f_7), cos(r f_0) .. cos(r f_7)]` with
/// `f_i = 10000^(−i/8)`.
pub fn timestep_embedding(r: usize) -> Vec<f64> {
    let half = TIME_EMBED_DIM / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp())
        .collect();
    let r = r as f64;
    freqs
        .iter()
        .map(|f| (r * f).sin())
        .chain(freqs.iter().map(|f| (r * f).cos()))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingNoise {
    /// Start from `c^R ~ N(0, I)` and add `√φ_r z` at every step but the last.
    #[default]
    Ancestral,
    /// Start from `c^R = 0` and drop the per-step noise.
    Deterministic,
}

/// Ancestral sampling with an arbitrary ε predictor `eps(c_r, r)`.
pub fn diffusion_sample_with<R, F>(
    width: usize,
    schedule: &DiffusionSchedule,
    mode: SamplingNoise,
    rng: &mut R,
    mut eps: F,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let mut c = match mode {
        SamplingNoise::Ancestral => normal_vec(rng, width),
        SamplingNoise::Deterministic => vec![0.0; width],
    };
    for r in (1..=schedule.steps()).rev() {
        let e = eps(&c, r)?;
        c = reverse_step(&c, &e, r, schedule);
        if mode == SamplingNoise::Ancestral && r > 1 {
            let s = schedule.phi(r).sqrt();
            for (v, z) in c.iter_mut().zip(normal_vec(rng, width)) {
                *v += s * z;
            }
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("diffusion sample at step {r}")));
        }
    }
    Ok(c)
}

/// Posterior mean `(c_r − φ_r / √(1 − ω_r) ε̂) / √(1 − φ_r)`.
fn reverse_step(c: &[f64], eps: &[f64], r: usize, schedule: &DiffusionSchedule) -> Vec<f64> {
    let phi = schedule.phi(r);
    let k = phi / (1.0 - schedule.omega(r)).sqrt();
    let scale = 1.0 / (1.0 - phi).sqrt();
    c.iter()
        .zip(eps)
        .map(|(c, e)| scale * (c - k * e))
        .collect()
}

/// `E ‖ε − ε̂‖²` averaged over width for one draw of `r` and `ε`, with an
/// arbitrary predictor `eps_hat(c_r, r)`.
pub fn diffusion_loss_with<R, F>(
    c0: &[f64],
    schedule: &DiffusionSchedule,
    rng: &mut R,
    eps_hat: F,
) -> Result<f64>
where
    R: Rng + ?Sized,
    F: FnOnce(&[f64], usize) -> Result<Vec<f64>>,
{
    let r = rng.random_range(1..=schedule.steps());
    let (c_r, eps) = diffusion_forward(c0, r, schedule, rng)?;
    let pred = eps_hat(&c_r, r)?;
    Ok(eps
        .iter()
        .zip(&pred)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / c0.len() as f64)
}

/// A noise target drawn for one continuous position.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionDraw {
    pub r: usize,
    pub eps: Vec<f64>,
}

impl DiffusionDraw {
    pub fn sample<R: Rng + ?Sized>(
        width: usize,
        schedule: &DiffusionSchedule,
        rng: &mut R,
    ) -> Self {
        Self {
            r: rng.random_range(1..=schedule.steps()),
            eps: normal_vec(rng, width),
        }
    }
}

/// `ε_ψ(c_r, r, h)`: an MLP on `[c_r, embed(r), h]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionHead {
    pub mlp: Mlp,
    pub width: usize,
    pub cond_dim: usize,
}

impl DiffusionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        cond_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let dims = [width + TIME_EMBED_DIM + cond_dim, hidden, hidden, width];
        Self {
            mlp: Mlp::new(store, name, &dims, Init::Scaled, rng),
            width,
            cond_dim,
        }
    }

    /// Predicted noise rows for `c_r: [B, width]`, steps `rs` and conditions `h: [B, cond_dim]`.
    pub fn predict(
        &self,
        g: &mut Graph<'_>,
        p: &Binding,
        c_r: Var,
        rs: &[usize],
        h: Var,
    ) -> Result<Var> {
        let emb: Vec<f64> = rs.iter().flat_map(|&r| timestep_embedding(r)).collect();
        let emb = g.constant(vec![rs.len(), TIME_EMBED_DIM], emb)?;
        let x = g.concat_cols(&[c_r, emb, h])?;
        self.mlp.forward(g, p, x)
    }

    /// Mean squared ε error for clean rows `c0` under conditions `h`.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_>,
        p: &Binding,
        c0: &[Vec<f64>],
        h: Var,
        draws: &[DiffusionDraw],
        schedule: &DiffusionSchedule,
    ) -> Result<Var> {
        if c0.len() != draws.len() || c0.iter().any(|c| c.len() != self.width) {
            return Err(Error::shape(
                "diffusion loss",
                &[c0.len(), self.width],
                &[draws.len()],
            ));
        }
        let mut noisy = Vec::with_capacity(c0.len() * self.width);
        let mut eps = Vec::with_capacity(c0.len() * self.width);
        for (c, d) in c0.iter().zip(draws) {
            noisy.extend(diffusion_forward_with(c, d.r, schedule, &d.eps)?);
            eps.extend_from_slice(&d.eps);
        }
        let rows = c0.len();
        let noisy = g.constant(vec![rows, self.width], noisy)?;
        let eps = g.constant(vec![rows, self.width], eps)?;
        let rs: Vec<usize> = draws.iter().map(|d| d.r).collect();
        let pred = self.predict(g, p, noisy, &rs, h)?;
        mse(g, pred, eps)
    }

    /// ε̂ for many independent chains at the same step `r`.
    pub fn eps_batch(
        &self,
        store: &ParamStore,
        c_r: &[f64],
        r: usize,
        h: &[f64],
    ) -> Result<Vec<f64>> {
        let rows = c_r.len() / self.width;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let c = g.constant(vec![rows, self.width], c_r.to_vec())?;
        let hv = g.constant(vec![rows, self.cond_dim], h.to_vec())?;
        let out = self.predict(&mut g, &p, c, &vec![r; rows], hv)?;
        Ok(g.value(out).to_vec())
    }

    /// Draws `n` samples under one shared condition `h`, all chains in lockstep.
    pub fn sample_many<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        h: &[f64],
        n: usize,
        schedule: &DiffusionSchedule,
        mode: SamplingNoise,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        if h.len() != self.cond_dim {
            return Err(Error::shape(
                "diffusion condition",
                &[h.len()],
                &[self.cond_dim],
            ));
        }
        self.sample_batch(store, &h.repeat(n), schedule, mode, rng)
    }

    /// One sample per row of the row-major condition matrix `conds`.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        conds: &[f64],
        schedule: &DiffusionSchedule,
        mode: SamplingNoise,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        if conds.is_empty() || !conds.len().is_multiple_of(self.cond_dim) {
            return Err(Error::shape(
                "diffusion condition",
                &[conds.len()],
                &[self.cond_dim],
            ));
        }
        let n = conds.len() / self.cond_dim;
        let flat = diffusion_sample_with(n * self.width, schedule, mode, rng, |c, r| {
            self.eps_batch(store, c, r, conds)
        })?;
        Ok(flat.chunks(self.width).map(<[f64]>::to_vec).collect())
    }
}

/// Fits a head to samples under one fixed condition vector and returns the
/// per-epoch mean loss.
pub fn train_head(
    head: &DiffusionHead,
    store: &mut ParamStore,
    samples: &[Vec<f64>],
    cond: &[f64],
    schedule: &DiffusionSchedule,
    train: &TrainConfig,
    seeds: &SeedTree,
) -> Result<Vec<f64>> {
    train.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no diffusion training samples"));
    }
    let mut shuffle = seeds.rng(Stream::Training, 1);
    let mut noise = seeds.rng(Stream::Sampling, 1);
    let mut opt = train.optimizer();
    let mut trace = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut sum = 0.0;
        for idx in epoch_batches(samples.len(), train.batch_size, &mut shuffle) {
            let c0: Vec<Vec<f64>> = idx.iter().map(|&i| samples[i].clone()).collect();
            let draws: Vec<DiffusionDraw> = (0..c0.len())
                .map(|_| DiffusionDraw::sample(head.width, schedule, &mut noise))
                .collect();
            let (loss, grads, binding) = {
                let mut g = Graph::new();
                let p = store.bind(&mut g);
                let h = g.constant(vec![c0.len(), head.cond_dim], cond.repeat(c0.len()))?;
                let l = head.loss_graph(&mut g, &p, &c0, h, &draws, schedule)?;
                let v = g.scalar(l);
                check_divergence(epoch, v)?;
                (v, g.backward(l)?, p)
            };
            store.accumulate(&binding, &grads)?;
            opt.step(store)?;
            sum += loss * c0.len() as f64;
        }
        trace.push(sum / samples.len() as f64);
    }
    Ok(trace)
}
