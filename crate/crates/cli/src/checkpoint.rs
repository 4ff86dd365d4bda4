//! JSON checkpoints and the on-disk layout of a run.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokcom::{Coder, Receiver, Tokenizer};

use crate::error::{CliError, CliResult};
use crate::pipeline::Transmitter;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerCheckpoint {
    pub config_hash: String,
    pub seed: u64,
    pub tokenizer: Tokenizer,
    pub coder: Coder,
}

impl TokenizerCheckpoint {
    pub fn transmitter(self) -> Transmitter {
        Transmitter {
            tokenizer: self.tokenizer,
            coder: self.coder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverCheckpoint {
    pub config_hash: String,
    pub seed: u64,
    /// `S_m` of the tokenizer the receiver was trained behind.
    pub tokens: usize,
    pub receiver: Receiver,
}

pub fn save<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(file, value)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    serde_json::from_reader(file)
        .map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))
}

/// Output paths under `<out>/<run_id>`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(out: &Path, run_id: &str) -> Self {
        Self {
            root: out.join(run_id),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Per-seed directory, optionally nested under a token-length sweep point.
    pub fn seed_dir(&self, seed: u64, tokens: Option<usize>) -> PathBuf {
        match tokens {
            Some(s) => self
                .root
                .join(format!("tokens-{s}"))
                .join(format!("seed-{seed}")),
            None => self.root.join(format!("seed-{seed}")),
        }
    }

    pub fn tokenizer(&self, seed: u64, tokens: Option<usize>) -> PathBuf {
        self.seed_dir(seed, tokens).join("tokenizer.json")
    }

    pub fn receiver(&self, seed: u64, tokens: Option<usize>) -> PathBuf {
        self.seed_dir(seed, tokens).join("receiver.json")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}
