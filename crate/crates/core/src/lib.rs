//! Token communication simulator.
//!
//! A source sample is compressed by a tokenizer into a latent token, coded
//! onto complex channel symbols, sent through an AWGN or Rayleigh channel,
//! decoded, and handed to a small causal transformer that predicts discrete
//! tokens with a softmax head and continuous tokens with a diffusion head.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod channel;
pub mod datasets;
pub mod error;
pub mod nn;
pub mod receiver;
pub mod rng;
pub mod tokenizer;
pub mod train;

pub use channel::{ChannelKind, Coder, CoderConfig, Equalizer};
pub use datasets::{DatasetKind, DatasetSpec};
pub use error::{Error, Result};
pub use receiver::{MllmConfig, PackedSequence, Receiver};
pub use rng::{SeedTree, Stream};
pub use tokenizer::{Modality, SourceSample, Tokenizer, TokenizerConfig};
pub use train::TrainConfig;
