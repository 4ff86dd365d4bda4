use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tokcom_cli::commands::{self, Options};
use tokcom_cli::config::parse_list;
use tokcom_cli::{CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "tokcom", version, about = "Token communication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the tokenizer and channel coder
    TrainTokenizer(Common),
    /// Train the receiver behind a saved tokenizer
    TrainReceiver(Common),
    /// Evaluate saved checkpoints across SNRs
    SweepSnr(Common),
    /// Train and evaluate the chain for several token lengths
    SweepTokenLength(Common),
    /// Compare latent variance profiles of sigma-GenIB and a learned-sigma VAE
    DiagnoseVariance(Common),
    /// Evaluate saved checkpoints
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config's seed list
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides output.dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated SNRs in dB; `inf` for a noiseless channel
    #[arg(long)]
    snr: Option<String>,
    /// Comma-separated token lengths
    #[arg(long)]
    lengths: Option<String>,
    /// Suppress progress output
    #[arg(long)]
    quiet: bool,
}

impl Common {
    fn options(&self) -> CliResult<Options> {
        let cfg = ExperimentConfig::load(&self.config)?;
        let mut opts = Options::new(cfg);
        if let Some(s) = self.seed {
            opts.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            opts.out = o.clone();
        }
        opts.snr = self.snr.as_deref().map(parse_list).transpose()?;
        opts.lengths = self.lengths.as_deref().map(parse_list).transpose()?;
        opts.quiet = self.quiet;
        Ok(opts)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::TrainTokenizer(c) => {
            commands::train_tokenizer_cmd(&c.options()?)?;
        }
        Command::TrainReceiver(c) => {
            commands::train_receiver_cmd(&c.options()?)?;
        }
        Command::SweepSnr(c) => {
            commands::sweep_snr_cmd(&c.options()?)?;
        }
        Command::SweepTokenLength(c) => {
            commands::sweep_token_length_cmd(&c.options()?)?;
        }
        Command::DiagnoseVariance(c) => {
            let report = commands::diagnose_variance_cmd(&c.options()?)?;
            if !c.quiet {
                println!(
                    "collapsed dimensions (median over seeds): sigma-GenIB {}, VAE {}",
                    report.median_collapsed_sigma_genib, report.median_collapsed_vae
                );
            }
        }
        Command::Eval(c) => {
            commands::eval_cmd(&c.options()?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
