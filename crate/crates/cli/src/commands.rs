//! Subcommand implementations. Each is a pure function of the config,
//! the master seeds and the checkpoints it reads.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokcom::tokenizer::{
    train_tokenizer, variance_profile, VarianceMode, VarianceProfile, SIGMA_FLOOR,
};
use tokcom::{SeedTree, Tokenizer};

use crate::checkpoint::{load, save, ReceiverCheckpoint, RunLayout, TokenizerCheckpoint};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::metrics::{median, write_csv, MetricsRow, TimingRow};
use crate::pipeline::{evaluate, fit_receiver, fit_tokenizer, prepare_data, Transmitter};

/// Resolved command-line options.
#[derive(Clone, Debug)]
pub struct Options {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub snr: Option<Vec<f64>>,
    pub lengths: Option<Vec<usize>>,
    pub quiet: bool,
}

impl Options {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            seeds: config.sweep_seeds(),
            out: config.output.dir.clone(),
            config,
            snr: None,
            lengths: None,
            quiet: true,
        }
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{}] {}", self.config.run_id, msg.as_ref());
        }
    }

    pub fn layout(&self) -> RunLayout {
        RunLayout::new(&self.out, &self.config.run_id)
    }

    /// Requested SNRs, ascending with `+∞` last.
    pub fn snr_list(&self) -> CliResult<Vec<f64>> {
        let mut v = self
            .snr
            .clone()
            .unwrap_or_else(|| self.config.channel.snr_list.clone());
        if v.is_empty() {
            return Err(CliError::Config(
                "no SNR values given (--snr or channel.snr_list)".into(),
            ));
        }
        v.sort_by(f64::total_cmp);
        v.dedup();
        Ok(v)
    }

    pub fn length_list(&self) -> CliResult<Vec<usize>> {
        let mut v = self
            .lengths
            .clone()
            .unwrap_or_else(|| self.config.eval.lengths.clone());
        if v.is_empty() {
            return Err(CliError::Config(
                "no token lengths given (--lengths or eval.lengths)".into(),
            ));
        }
        if let Some(s) = v.iter().find(|s| **s < 2) {
            return Err(CliError::Config(format!("token length {s} is below 2")));
        }
        v.sort_unstable();
        v.dedup();
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerTraceRow {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub total: f64,
    pub kl: f64,
    pub stochastic: f64,
    pub deterministic: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverTraceRow {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub total: f64,
    pub lm_loss: Option<f64>,
    pub diff_loss: Option<f64>,
    pub config_hash: String,
}

fn train_tokenizer_stage(
    opts: &Options,
    cfg: &ExperimentConfig,
    seed: u64,
    tokens: Option<usize>,
) -> CliResult<(Transmitter, Vec<TokenizerTraceRow>)> {
    let seeds = SeedTree::new(seed);
    let (train, _) = prepare_data(cfg, &seeds)?;
    opts.log(format!(
        "seed {seed}: training tokenizer on {} samples",
        train.len()
    ));
    let (tx, trace) = fit_tokenizer(cfg, &seeds, &train)?;
    let ckpt = TokenizerCheckpoint {
        config_hash: cfg.hash(),
        seed,
        tokenizer: tx.tokenizer,
        coder: tx.coder,
    };
    save(&opts.layout().tokenizer(seed, tokens), &ckpt)?;
    let rows = trace
        .iter()
        .map(|t| TokenizerTraceRow {
            run_id: cfg.run_id.clone(),
            seed,
            epoch: t.epoch,
            total: t.total,
            kl: t.kl,
            stochastic: t.stochastic,
            deterministic: t.deterministic,
            config_hash: cfg.hash(),
        })
        .collect();
    Ok((ckpt.transmitter(), rows))
}

fn load_transmitter(path: &Path, cfg: &ExperimentConfig) -> CliResult<Transmitter> {
    let ckpt: TokenizerCheckpoint = load(path)?;
    let (have, want) = (&ckpt.tokenizer.config, &cfg.tokenizer);
    if have.tokens != want.tokens
        || have.token_width != want.token_width
        || have.modality != want.modality
    {
        return Err(CliError::Mismatch(format!(
            "{} holds a tokenizer with S_m = {} (width {}), the config asks for S_m = {} (width {})",
            path.display(),
            have.tokens,
            have.token_width,
            want.tokens,
            want.token_width
        )));
    }
    Ok(ckpt.transmitter())
}

fn load_receiver(path: &Path, tx: &Transmitter) -> CliResult<tokcom::Receiver> {
    let ckpt: ReceiverCheckpoint = load(path)?;
    if ckpt.tokens != tx.tokenizer.config.tokens {
        return Err(CliError::Mismatch(format!(
            "{} was trained behind S_m = {}, the tokenizer has S_m = {}",
            path.display(),
            ckpt.tokens,
            tx.tokenizer.config.tokens
        )));
    }
    Ok(ckpt.receiver)
}

fn train_receiver_stage(
    opts: &Options,
    cfg: &ExperimentConfig,
    seed: u64,
    tx: &Transmitter,
    tokens: Option<usize>,
) -> CliResult<(tokcom::Receiver, Vec<ReceiverTraceRow>)> {
    let seeds = SeedTree::new(seed);
    let (train, _) = prepare_data(cfg, &seeds)?;
    opts.log(format!("seed {seed}: training receiver"));
    let (rx, trace) = fit_receiver(cfg, &seeds, tx, &train)?;
    let ckpt = ReceiverCheckpoint {
        config_hash: cfg.hash(),
        seed,
        tokens: tx.tokenizer.config.tokens,
        receiver: rx,
    };
    save(&opts.layout().receiver(seed, tokens), &ckpt)?;
    let rows = trace
        .iter()
        .map(|t| ReceiverTraceRow {
            run_id: cfg.run_id.clone(),
            seed,
            epoch: t.epoch,
            total: t.total,
            lm_loss: t.lm,
            diff_loss: t.diff,
            config_hash: cfg.hash(),
        })
        .collect();
    Ok((ckpt.receiver, rows))
}

/// Trains one tokenizer and coder per seed; writes checkpoints and `tokenizer_trace.csv`.
pub fn train_tokenizer_cmd(opts: &Options) -> CliResult<Vec<TokenizerTraceRow>> {
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        rows.extend(train_tokenizer_stage(opts, &opts.config, seed, None)?.1);
    }
    write_csv(&opts.layout().file("tokenizer_trace.csv"), &rows)?;
    Ok(rows)
}

/// Trains one receiver per seed behind the saved tokenizer; writes `receiver_trace.csv`.
pub fn train_receiver_cmd(opts: &Options) -> CliResult<Vec<ReceiverTraceRow>> {
    let layout = opts.layout();
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let tx = load_transmitter(&layout.tokenizer(seed, None), &opts.config)?;
        rows.extend(train_receiver_stage(opts, &opts.config, seed, &tx, None)?.1);
    }
    write_csv(&layout.file("receiver_trace.csv"), &rows)?;
    Ok(rows)
}

fn evaluate_points(
    opts: &Options,
    cfg: &ExperimentConfig,
    seed: u64,
    tx: &Transmitter,
    rx: &tokcom::Receiver,
    snrs: &[f64],
    hash: &str,
) -> CliResult<Vec<(f64, Vec<MetricsRow>, TimingRow)>> {
    let seeds = SeedTree::new(seed);
    let (_, test) = prepare_data(cfg, &seeds)?;
    snrs.iter()
        .map(|&snr| {
            opts.log(format!(
                "seed {seed}: evaluating S_m = {} at {snr} dB",
                cfg.tokenizer.tokens
            ));
            let ev = evaluate(cfg, &seeds, tx, rx, &test, snr)?;
            let row = |(metric, value)| MetricsRow {
                run_id: cfg.run_id.clone(),
                seed,
                snr_db: snr,
                token_length: cfg.tokenizer.tokens,
                metric,
                value,
                config_hash: hash.to_string(),
            };
            let timing = TimingRow {
                run_id: cfg.run_id.clone(),
                seed,
                snr_db: snr,
                token_length: cfg.tokenizer.tokens,
                samples: ev.samples,
                wall_time: ev.seconds,
                wall_time_per_sample: ev.seconds / ev.samples as f64,
                config_hash: hash.to_string(),
            };
            Ok((snr, ev.metrics.into_iter().map(row).collect(), timing))
        })
        .collect()
}

fn sorted_by_snr(
    mut points: Vec<(f64, Vec<MetricsRow>, TimingRow)>,
) -> (Vec<MetricsRow>, Vec<TimingRow>) {
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for (_, r, t) in points {
        rows.extend(r);
        timing.push(t);
    }
    (rows, timing)
}

/// Evaluates the saved checkpoints at every SNR; writes `sweep_snr.csv`
/// (sorted by SNR) and `sweep_snr_timing.csv`.
pub fn sweep_snr_cmd(opts: &Options) -> CliResult<Vec<MetricsRow>> {
    metrics_cmd(opts, "sweep_snr")
}

/// Same evaluation as `sweep-snr`, written to `eval.csv`.
pub fn eval_cmd(opts: &Options) -> CliResult<Vec<MetricsRow>> {
    metrics_cmd(opts, "eval")
}

fn metrics_cmd(opts: &Options, name: &str) -> CliResult<Vec<MetricsRow>> {
    let layout = opts.layout();
    let snrs = opts.snr_list()?;
    let hash = opts.config.hash();
    let mut points = Vec::new();
    for &seed in &opts.seeds {
        let tx = load_transmitter(&layout.tokenizer(seed, None), &opts.config)?;
        let rx = load_receiver(&layout.receiver(seed, None), &tx)?;
        points.extend(evaluate_points(
            opts,
            &opts.config,
            seed,
            &tx,
            &rx,
            &snrs,
            &hash,
        )?);
    }
    let (rows, timing) = sorted_by_snr(points);
    write_csv(&layout.file(&format!("{name}.csv")), &rows)?;
    write_csv(&layout.file(&format!("{name}_timing.csv")), &timing)?;
    Ok(rows)
}

/// Trains and evaluates the full chain for each `S_m`; writes
/// `sweep_token_length.csv` and `sweep_token_length_timing.csv`.
pub fn sweep_token_length_cmd(opts: &Options) -> CliResult<(Vec<MetricsRow>, Vec<TimingRow>)> {
    let snrs = opts.snr_list()?;
    let hash = opts.config.hash();
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let mut tok_trace = Vec::new();
    let mut rx_trace = Vec::new();
    for s in opts.length_list()? {
        let cfg = opts.config.with_tokens(s)?;
        let mut points = Vec::new();
        for &seed in &opts.seeds {
            let (tx, t) = train_tokenizer_stage(opts, &cfg, seed, Some(s))?;
            let (rx, r) = train_receiver_stage(opts, &cfg, seed, &tx, Some(s))?;
            tok_trace.extend(t);
            rx_trace.extend(r);
            points.extend(evaluate_points(opts, &cfg, seed, &tx, &rx, &snrs, &hash)?);
        }
        let (r, t) = sorted_by_snr(points);
        rows.extend(r);
        timing.extend(t);
    }
    let layout = opts.layout();
    write_csv(&layout.file("sweep_token_length.csv"), &rows)?;
    write_csv(&layout.file("sweep_token_length_timing.csv"), &timing)?;
    write_csv(
        &layout.file("sweep_token_length_tokenizer_trace.csv"),
        &tok_trace,
    )?;
    write_csv(
        &layout.file("sweep_token_length_receiver_trace.csv"),
        &rx_trace,
    )?;
    Ok((rows, timing))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRun {
    pub seed: u64,
    pub sigma_genib: VarianceProfile,
    pub vae: VarianceProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub run_id: String,
    pub config_hash: String,
    /// A dimension counts as collapsed when its σ and the spread of its μ
    /// across the data are both below this.
    pub collapse_threshold: f64,
    pub runs: Vec<VarianceRun>,
    pub median_collapsed_sigma_genib: f64,
    pub median_collapsed_vae: f64,
}

/// Trains σ-GenIB and the learned-σ VAE on the same data and seed, without
/// the channel, and writes `variance_report.json`.
pub fn diagnose_variance_cmd(opts: &Options) -> CliResult<VarianceReport> {
    let cfg = &opts.config;
    let mut runs = Vec::new();
    for &seed in &opts.seeds {
        let seeds = SeedTree::new(seed);
        let (train, _) = prepare_data(cfg, &seeds)?;
        let fit = |variance| -> CliResult<VarianceProfile> {
            let mut tc = cfg.tokenizer.clone();
            tc.variance = variance;
            let mut tok = Tokenizer::new(tc, seed)?;
            train_tokenizer(&mut tok, None, &train, &cfg.train.tokenizer, &seeds)?;
            Ok(variance_profile(&tok, &train)?)
        };
        opts.log(format!(
            "seed {seed}: fitting sigma-GenIB and VAE tokenizers"
        ));
        let sigma_genib = fit(VarianceMode::Fixed)?;
        let vae = fit(VarianceMode::Learned)?;
        runs.push(VarianceRun {
            seed,
            sigma_genib,
            vae,
        });
    }
    let med = |f: fn(&VarianceRun) -> usize| {
        median(&runs.iter().map(|r| f(r) as f64).collect::<Vec<_>>())
    };
    let report = VarianceReport {
        run_id: cfg.run_id.clone(),
        config_hash: cfg.hash(),
        collapse_threshold: SIGMA_FLOOR,
        median_collapsed_sigma_genib: med(|r| r.sigma_genib.collapsed),
        median_collapsed_vae: med(|r| r.vae.collapsed),
        runs,
    };
    save(&opts.layout().file("variance_report.json"), &report)?;
    Ok(report)
}
