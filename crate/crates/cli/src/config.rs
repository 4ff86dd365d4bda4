//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokcom::channel::CoderMode;
use tokcom::receiver::{GenerationOptions, SamplingNoise, TokenStrategy};
use tokcom::tokenizer::ChannelSchedule;
use tokcom::{
    ChannelKind, CoderConfig, DatasetKind, DatasetSpec, Equalizer, MllmConfig, Modality, SeedTree,
    Stream, TokenizerConfig, TrainConfig,
};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Master seed for single runs.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Master seeds for sweeps; empty means `[seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub tokenizer: TokenizerConfig,
    pub channel: ChannelConfig,
    pub receiver: MllmConfig,
    #[serde(default)]
    pub train: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetKind,
    pub size: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Data range used as the PSNR peak.
    #[serde(default = "default_peak")]
    pub peak: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_peak() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// Training SNR range in dB, sampled uniformly per batch.
    pub train_snr_db: (f64, f64),
    /// Default evaluation SNRs for `sweep-snr`.
    #[serde(default)]
    pub snr_list: Vec<f64>,
    #[serde(default = "default_power")]
    pub power: f64,
    pub bandwidth_ratio: f64,
    #[serde(default)]
    pub equalizer: Equalizer,
    #[serde(default)]
    pub coder: CoderMode,
    #[serde(default)]
    pub coder_hidden: Option<usize>,
}

fn default_power() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub tokenizer: TrainConfig,
    pub receiver: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cap on test samples per SNR point; `None` evaluates the whole split.
    pub test_samples: Option<usize>,
    pub strategy: TokenStrategy,
    pub noise: SamplingNoise,
    /// Sequences per generation batch.
    pub batch: usize,
    /// Token lengths for `sweep-token-length`.
    pub lengths: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_samples: None,
            strategy: TokenStrategy::Greedy,
            noise: SamplingNoise::Deterministic,
            batch: 250,
            lengths: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn generation(&self) -> GenerationOptions {
        GenerationOptions {
            strategy: self.strategy,
            noise: self.noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, first 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn modality(&self) -> Modality {
        self.tokenizer.modality
    }

    pub fn dataset_spec(&self, seeds: &SeedTree) -> DatasetSpec {
        DatasetSpec {
            source: self.dataset.source.clone(),
            size: self.dataset.size,
            seed: seeds.seed(Stream::Dataset, 0),
        }
    }

    pub fn coder_config(&self) -> CoderConfig {
        CoderConfig {
            power: self.channel.power,
            hidden: self.channel.coder_hidden,
            mode: self.channel.coder,
            equalizer: self.channel.equalizer,
            ..CoderConfig::new(self.tokenizer.latent_dim(), self.channel.bandwidth_ratio)
        }
    }

    pub fn train_schedule(&self) -> ChannelSchedule {
        ChannelSchedule {
            kind: self.channel.kind,
            snr_db: self.channel.train_snr_db,
        }
    }

    /// A copy with `S_m` replaced, for token-length sweeps.
    pub fn with_tokens(&self, tokens: usize) -> Result<Self, CliError> {
        let mut cfg = self.clone();
        cfg.tokenizer.tokens = tokens;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let core = |r: tokcom::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        if self.run_id.is_empty() || self.run_id.contains([',', '\n', '/']) {
            return bad("run_id must be non-empty and free of ',', '/' and newlines".into());
        }
        core(self.dataset.source.validate())?;
        if self.dataset.size < 2 {
            return bad("dataset.size must be at least 2".into());
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            return bad("dataset.train_fraction must lie in (0, 1)".into());
        }
        if !(self.dataset.peak > 0.0 && self.dataset.peak.is_finite()) {
            return bad("dataset.peak must be positive".into());
        }
        core(self.tokenizer.validate())?;
        core(self.receiver.validate())?;
        core(self.train.tokenizer.validate())?;
        core(self.train.receiver.validate())?;
        core(self.coder_config().validate())?;

        let t = &self.tokenizer;
        let src = &self.dataset.source;
        if src.is_discrete() != (t.modality == Modality::Discrete) {
            return bad("tokenizer modality does not match the dataset".into());
        }
        if t.input_len != src.sample_len() {
            return bad(format!(
                "tokenizer.input_len {} but samples have length {}",
                t.input_len,
                src.sample_len()
            ));
        }
        if let Some(v) = src.alphabet() {
            if t.alphabet != v {
                return bad(format!(
                    "tokenizer.alphabet {} but the dataset alphabet is {v}",
                    t.alphabet
                ));
            }
            if self.receiver.vocab < v {
                return bad(format!(
                    "receiver.vocab {} is smaller than the alphabet {v}",
                    self.receiver.vocab
                ));
            }
        }
        if self.receiver.token_width != t.token_width {
            return bad("receiver.token_width must equal tokenizer.token_width".into());
        }
        let needed = match t.modality {
            Modality::Discrete => 2 * t.input_len,
            Modality::Continuous => 2 * t.tokens,
        };
        if self.receiver.max_len < needed {
            return bad(format!(
                "receiver.max_len {} is below the sequence length {needed}",
                self.receiver.max_len
            ));
        }
        let (lo, hi) = self.channel.train_snr_db;
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return bad("channel.train_snr_db must be an ordered pair".into());
        }
        if self.channel.snr_list.iter().any(|s| s.is_nan()) {
            return bad("channel.snr_list contains NaN".into());
        }
        if self.eval.batch == 0 || self.eval.test_samples == Some(0) {
            return bad("eval.batch and eval.test_samples must be positive".into());
        }
        if self.eval.lengths.iter().any(|&s| s < 2) {
            return bad("token lengths must be at least 2".into());
        }
        Ok(())
    }
}

/// Parses a comma-separated list; `inf` is accepted for SNR sentinels.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse()
                .map_err(|_| CliError::Config(format!("cannot parse list entry `{v}`")))
        })
        .collect()
}
