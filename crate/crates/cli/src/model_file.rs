//! The `model.cfg` TOML file read by `defgen train`.
//!
//! ```toml
//! [model]
//! d_model = 128
//! n_heads = 4
//! dropout = 0.1
//!
//! [train]
//! batch_size = 16
//! max_epochs = 30
//! ```
//!
//! Every key is optional. Missing model keys take the desk-scale defaults and
//! `vocab_size` always comes from the tokenizer. Missing training keys take
//! the defaults of the selected phase.

use anyhow::{bail, Context, Result};
use defgen_core::training::{OptimizerKind, Phase};
use defgen_core::{ModelConfig, TrainConfig};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    d_model: Option<usize>,
    n_heads: Option<usize>,
    n_encoder_layers: Option<usize>,
    n_decoder_layers: Option<usize>,
    d_ff: Option<usize>,
    vocab_size: Option<usize>,
    max_positions: Option<usize>,
    dropout: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    /// `0` disables clipping.
    grad_clip_norm: Option<f64>,
    optimizer: Option<OptimizerKind>,
    max_tokens: Option<usize>,
    /// `0` disables early stopping.
    patience: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainSection,
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing model config")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let m = &self.model;
        if let Some(v) = m.vocab_size {
            if v != vocab_size {
                bail!("model config vocab_size {v} does not match tokenizer vocabulary {vocab_size}");
            }
        }
        let d = ModelConfig::desk(vocab_size);
        let cfg = ModelConfig {
            d_model: m.d_model.unwrap_or(d.d_model),
            n_heads: m.n_heads.unwrap_or(d.n_heads),
            n_encoder_layers: m.n_encoder_layers.unwrap_or(d.n_encoder_layers),
            n_decoder_layers: m.n_decoder_layers.unwrap_or(d.n_decoder_layers),
            d_ff: m.d_ff.unwrap_or(d.d_ff),
            vocab_size,
            max_positions: m.max_positions.unwrap_or(d.max_positions),
            n_segments: d.n_segments,
            dropout: m.dropout.unwrap_or(d.dropout),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, phase: Phase, seed: u64) -> TrainConfig {
        let t = &self.train;
        let d = TrainConfig::for_phase(phase);
        TrainConfig {
            phase,
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            max_epochs: t.max_epochs.unwrap_or(d.max_epochs),
            grad_clip_norm: match t.grad_clip_norm {
                Some(c) if c > 0.0 => Some(c),
                Some(_) => None,
                None => d.grad_clip_norm,
            },
            seed,
            optimizer: t.optimizer.unwrap_or(d.optimizer),
            max_tokens: t.max_tokens.unwrap_or(d.max_tokens),
            patience: match t.patience {
                Some(0) => None,
                Some(p) => Some(p),
                None => d.patience,
            },
        }
    }
}
