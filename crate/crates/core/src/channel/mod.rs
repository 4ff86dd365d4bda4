//! Power-constrained complex baseband channel.
//!
//! Frames are complex vectors stored as separate real and imaginary parts.
//! A [`ChannelRealization`] holds one flat gain `h` for the whole frame plus the
//! noise variance implied by the configured SNR: `σ_n² = P / 10^(snr_db/10)`.
//! An infinite SNR is a valid, noiseless realization.

mod coder;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normal;

pub use coder::{
    power_normalize_rows, CodedChannel, Coder, CoderConfig, CoderMode, FrameDraw, IdentityChannel,
    LatentChannel,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexSignal {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub power_budget: f64,
}

impl ComplexSignal {
    pub fn new(re: Vec<f64>, im: Vec<f64>, power_budget: f64) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::shape("complex signal", &[re.len()], &[im.len()]));
        }
        if !(power_budget > 0.0) {
            return Err(Error::invalid("power budget must be positive"));
        }
        Ok(Self {
            re,
            im,
            power_budget,
        })
    }

    /// Pairs an interleaved real vector: even indices are real parts, odd
    /// indices imaginary parts.
    pub fn from_interleaved(v: &[f64], power_budget: f64) -> Result<Self> {
        if !v.len().is_multiple_of(2) {
            return Err(Error::invalid("interleaved signal needs an even length"));
        }
        let re = v.iter().step_by(2).copied().collect();
        let im = v.iter().skip(1).step_by(2).copied().collect();
        Self::new(re, im, power_budget)
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .flat_map(|(&r, &i)| [r, i])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }

    /// `(1/N) Σ |z_k|²`.
    pub fn mean_power(&self) -> f64 {
        self.energy() / self.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerNormalized {
    pub signal: ComplexSignal,
    /// Set when the input was all zeros and was returned unchanged.
    pub zero_input: bool,
}

/// Scales `z` by `sqrt(P·N / ‖z‖²)` so its mean power is exactly the budget.
pub fn power_normalize(z: &ComplexSignal) -> PowerNormalized {
    let energy = z.energy();
    if energy == 0.0 {
        return PowerNormalized {
            signal: z.clone(),
            zero_input: true,
        };
    }
    let scale = (z.power_budget * z.len() as f64 / energy).sqrt();
    PowerNormalized {
        signal: ComplexSignal {
            re: z.re.iter().map(|v| v * scale).collect(),
            im: z.im.iter().map(|v| v * scale).collect(),
            power_budget: z.power_budget,
        },
        zero_input: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl ChannelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub h_re: f64,
    pub h_im: f64,
    pub noise_var: f64,
    pub snr_db: f64,
    pub kind: ChannelKind,
}

impl ChannelRealization {
    /// Unit gain and no noise.
    pub fn noiseless() -> Self {
        Self {
            h_re: 1.0,
            h_im: 0.0,
            noise_var: 0.0,
            snr_db: f64::INFINITY,
            kind: ChannelKind::Awgn,
        }
    }

    pub fn gain_power(&self) -> f64 {
        self.h_re * self.h_re + self.h_im * self.h_im
    }
}

/// `σ_n² = P / 10^(snr_db/10)`; `+∞` dB gives zero noise.
pub fn noise_variance(snr_db: f64, power: f64) -> f64 {
    power / 10f64.powf(snr_db / 10.0)
}

/// Draws a frame realization. Rayleigh gains are `CN(0, 1)`.
pub fn sample_channel<R: Rng + ?Sized>(
    kind: ChannelKind,
    snr_db: f64,
    power: f64,
    rng: &mut R,
) -> ChannelRealization {
    let (h_re, h_im) = match kind {
        ChannelKind::Awgn => (1.0, 0.0),
        ChannelKind::Rayleigh => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            (s * normal(rng), s * normal(rng))
        }
    };
    ChannelRealization {
        h_re,
        h_im,
        noise_var: noise_variance(snr_db, power),
        snr_db,
        kind,
    }
}

/// Circularly symmetric Gaussian noise, interleaved, variance `noise_var` per
/// complex symbol.
pub fn sample_noise<R: Rng + ?Sized>(symbols: usize, noise_var: f64, rng: &mut R) -> Vec<f64> {
    let s = (noise_var / 2.0).sqrt();
    (0..2 * symbols).map(|_| s * normal(rng)).collect()
}

/// `ẑ = h z + n` with a caller-supplied interleaved noise vector.
pub fn transmit_with_noise(
    z: &ComplexSignal,
    c: &ChannelRealization,
    noise: &[f64],
) -> Result<ComplexSignal> {
    if noise.len() != 2 * z.len() {
        return Err(Error::shape("transmit", &[2 * z.len()], &[noise.len()]));
    }
    let (re, im) =
        z.re.iter()
            .zip(&z.im)
            .enumerate()
            .map(|(k, (&r, &i))| {
                (
                    c.h_re * r - c.h_im * i + noise[2 * k],
                    c.h_re * i + c.h_im * r + noise[2 * k + 1],
                )
            })
            .unzip();
    Ok(ComplexSignal {
        re,
        im,
        power_budget: z.power_budget,
    })
}

/// `ẑ = h z + n` with fresh noise.
pub fn transmit<R: Rng + ?Sized>(
    z: &ComplexSignal,
    c: &ChannelRealization,
    rng: &mut R,
) -> ComplexSignal {
    let noise = sample_noise(z.len(), c.noise_var, rng);
    transmit_with_noise(z, c, &noise).expect("noise sized to the frame")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equalizer {
    ZeroForcing,
    #[default]
    Mmse,
}

/// Complex coefficient the received frame is multiplied by.
pub fn equalizer_coefficient(
    c: &ChannelRealization,
    power: f64,
    mode: Equalizer,
) -> Result<(f64, f64)> {
    let g = c.gain_power();
    let denom = match mode {
        Equalizer::ZeroForcing => {
            if g == 0.0 {
                return Err(Error::invalid(
                    "zero-forcing equalization with zero channel gain",
                ));
            }
            g
        }
        Equalizer::Mmse => g + c.noise_var / power,
    };
    if denom == 0.0 {
        // MMSE with h = 0 and no noise: nothing was received.
        return Ok((0.0, 0.0));
    }
    Ok((c.h_re / denom, -c.h_im / denom))
}

/// Zero-forcing `ẑ h*/|h|²` or MMSE `ẑ h*/(|h|² + σ_n²/P)`.
pub fn equalize(
    z_hat: &ComplexSignal,
    c: &ChannelRealization,
    mode: Equalizer,
) -> Result<ComplexSignal> {
    let (wr, wi) = equalizer_coefficient(c, z_hat.power_budget, mode)?;
    let (re, im) = z_hat
        .re
        .iter()
        .zip(&z_hat.im)
        .map(|(&r, &i)| (wr * r - wi * i, wr * i + wi * r))
        .unzip();
    Ok(ComplexSignal {
        re,
        im,
        power_budget: z_hat.power_budget,
    })
}

/// `10 log10(‖h z‖² / ‖n‖²)` for a transmitted frame and its noise.
pub fn empirical_snr_db(z: &ComplexSignal, c: &ChannelRealization, noise: &[f64]) -> f64 {
    let signal = c.gain_power() * z.energy();
    let noise_energy: f64 = noise.iter().map(|v| v * v).sum();
    10.0 * (signal / noise_energy).log10()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub frame_id: u64,
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub h_re: f64,
    pub h_im: f64,
    pub empirical_snr_db: f64,
}

/// CSV with columns `frame_id,kind,snr_db,h_re,h_im,empirical_snr_db`.
pub fn write_trace<W: Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "frame_id,kind,snr_db,h_re,h_im,empirical_snr_db")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.frame_id,
            r.kind.as_str(),
            r.snr_db,
            r.h_re,
            r.h_im,
            r.empirical_snr_db
        )?;
    }
    Ok(())
}
