//! TOML service configuration and startup loading of models and indexes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use defgen_core::corpus::{load_dataset, DatasetFormat};
use defgen_core::decoding::{GenerationSpec, Strategy, DEFAULT_BEAM_WIDTH, DEFAULT_MAX_LEN};
use defgen_core::router::{CorpusIndex, Gazetteer, Mode, ModelGenerator, Router, DEFAULT_EXAMPLES};
use defgen_core::tokenizer::SubwordTokenizer;
use defgen_core::training::load_checkpoint;
use serde::Deserialize;

use crate::feedback::FeedbackStore;
use crate::AppState;

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_examples() -> usize {
    DEFAULT_EXAMPLES
}

fn default_beam() -> usize {
    DEFAULT_BEAM_WIDTH
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub checkpoint: PathBuf,
    #[serde(default = "default_beam")]
    pub beam: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    pub tokenizer: PathBuf,
    pub gazetteer: Option<PathBuf>,
    /// A JSON-Lines dataset (its contexts) or a plain file with one
    /// sentence per line.
    pub corpus_index: Option<PathBuf>,
    pub feedback_store: PathBuf,
    #[serde(default = "default_examples")]
    pub examples_k: usize,
    #[serde(default)]
    pub modes: BTreeMap<Mode, ModeConfig>,
}

impl ServiceConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ServiceConfig = toml::from_str(text).context("parsing service config")?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.tokenizer);
        fix(&mut cfg.feedback_store);
        cfg.gazetteer.as_mut().map(fix);
        cfg.corpus_index.as_mut().map(fix);
        for m in cfg.modes.values_mut() {
            fix(&mut m.checkpoint);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }
}

fn load_index(path: &Path) -> Result<CorpusIndex> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let ds = load_dataset(path, DatasetFormat::JsonLines).with_context(|| format!("loading {}", path.display()))?;
        Ok(CorpusIndex::from_dataset(&ds))
    } else {
        CorpusIndex::load(path).with_context(|| format!("loading {}", path.display()))
    }
}

/// Loads everything the service needs. Modes whose checkpoint cannot be
/// loaded are left out (and answer 503) instead of failing startup.
pub fn build_state(cfg: &ServiceConfig) -> Result<AppState> {
    let tokenizer = Arc::new(
        SubwordTokenizer::load(&cfg.tokenizer).with_context(|| format!("loading {}", cfg.tokenizer.display()))?,
    );
    let gazetteer = match &cfg.gazetteer {
        Some(p) => Gazetteer::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Gazetteer::default(),
    };
    let index = match &cfg.corpus_index {
        Some(p) => load_index(p)?,
        None => CorpusIndex::default(),
    };
    let mut router = Router::new(Arc::new(gazetteer), index).with_examples(cfg.examples_k);
    for (&mode, m) in &cfg.modes {
        match load_checkpoint(&m.checkpoint) {
            Ok(ckpt) => {
                if ckpt.config().vocab_size != tokenizer.vocab_size() {
                    log::error!(
                        "{mode}: checkpoint vocabulary {} does not match tokenizer {}; mode disabled",
                        ckpt.config().vocab_size,
                        tokenizer.vocab_size()
                    );
                    continue;
                }
                let spec = GenerationSpec {
                    strategy: if m.beam <= 1 {
                        Strategy::Greedy
                    } else {
                        Strategy::Beam { width: m.beam }
                    },
                    max_len: m.max_len,
                    ..GenerationSpec::new(mode.output_lang())
                };
                spec.validate()?;
                let id = m
                    .checkpoint
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| mode.to_string());
                let generator = ModelGenerator::new(ckpt.params, tokenizer.clone(), mode, spec, id);
                router = router.with_model(mode, Arc::new(generator));
                log::info!("{mode}: loaded {}", m.checkpoint.display());
            }
            Err(e) => log::warn!("{mode}: checkpoint {} unavailable: {e}", m.checkpoint.display()),
        }
    }
    let store = FeedbackStore::open(&cfg.feedback_store)
        .with_context(|| format!("opening {}", cfg.feedback_store.display()))?;
    Ok(AppState::new(router, store))
}
