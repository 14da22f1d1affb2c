//! Two-phase optimization: a warm-up phase that trains only the decoder side
//! while the encoder-side parameters stay fixed, followed by fine-tuning of the
//! whole model at a lower learning rate.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, DictEntry};
use crate::model::{accumulate_gradient, forward, nll_sum, Example, ModelConfig, ModelError, ModelParams, PassOptions};
use crate::tokenizer::{InputEncoding, SubwordTokenizer, TokenizerError, EOS_ID, PAD_ID};

pub const WARMUP_LR: f64 = 1e-4;
pub const FINETUNE_LR: f64 = 1e-5;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DEFGENCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { loss: f64, step: u64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Finetune,
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "warmup" => Ok(Phase::Warmup),
            "finetune" => Ok(Phase::Finetune),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Upper bound on padded tokens (encoder + decoder) per batch.
    pub max_tokens: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl TrainConfig {
    pub fn warmup() -> Self {
        Self::for_phase(Phase::Warmup)
    }

    pub fn finetune() -> Self {
        Self::for_phase(Phase::Finetune)
    }

    pub fn for_phase(phase: Phase) -> Self {
        TrainConfig {
            phase,
            learning_rate: match phase {
                Phase::Warmup => WARMUP_LR,
                Phase::Finetune => FINETUNE_LR,
            },
            batch_size: 16,
            max_epochs: 30,
            grad_clip_norm: Some(1.0),
            seed: 0,
            optimizer: OptimizerKind::Adam,
            max_tokens: 4096,
            patience: Some(5),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moments (empty for SGD) and the global step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    fn fresh(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Adam => OptimizerState {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
            OptimizerKind::Sgd => OptimizerState {
                step: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    pub best_valid_loss: Option<f64>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            optimizer: None,
            epoch: 0,
            best_valid_loss: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }
}

/// Truncates an over-long input to `max` tokens, keeping the closing EOS.
pub fn fit_input(mut enc: InputEncoding, max: usize) -> InputEncoding {
    if enc.len() > max && max >= 1 {
        enc.token_ids.truncate(max);
        enc.position_ids.truncate(max);
        enc.segment_ids.truncate(max);
        enc.token_ids[max - 1] = EOS_ID;
    }
    enc
}

/// Encoder input, decoder prefix and target for one entry.
pub fn encode_entry(
    tokenizer: &SubwordTokenizer,
    entry: &DictEntry,
    max_positions: usize,
) -> Result<Example, TokenizerError> {
    let input = tokenizer.build_input_sequence(&entry.word, &entry.context, &entry.source_lang)?;
    let (mut prefix, mut target) = tokenizer.build_target(&entry.definition, &entry.target_lang)?;
    if prefix.len() > max_positions {
        prefix.truncate(max_positions);
        target.truncate(max_positions);
        target[max_positions - 1] = EOS_ID;
    }
    Ok(Example {
        input: fit_input(input, max_positions),
        prefix,
        target,
    })
}

fn pad_batch(batch: &[Example]) -> Vec<Example> {
    let max_in = batch.iter().map(|e| e.input.len()).max().unwrap_or(0);
    let max_out = batch.iter().map(|e| e.prefix.len()).max().unwrap_or(0);
    batch
        .iter()
        .map(|e| {
            let mut prefix = e.prefix.clone();
            let mut target = e.target.clone();
            prefix.resize(max_out, PAD_ID);
            target.resize(max_out, PAD_ID);
            Example {
                input: e.input.padded(max_in),
                prefix,
                target,
            }
        })
        .collect()
}

/// Owns the parameters and optimizer state for one phase.
pub struct Trainer<'t> {
    params: ModelParams,
    state: OptimizerState,
    config: TrainConfig,
    tokenizer: &'t SubwordTokenizer,
}

impl<'t> Trainer<'t> {
    pub fn new(params: ModelParams, config: TrainConfig, tokenizer: &'t SubwordTokenizer) -> Self {
        let state = OptimizerState::fresh(config.optimizer, params.len());
        Trainer {
            params,
            state,
            config,
            tokenizer,
        }
    }

    /// Continues from a checkpoint, reusing its optimizer state when present
    /// and compatible with `config`.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig, tokenizer: &'t SubwordTokenizer) -> Self {
        let n = ckpt.params.len();
        let state = match (ckpt.optimizer, config.optimizer) {
            (Some(s), OptimizerKind::Adam) if s.m.len() == n => s,
            (Some(s), OptimizerKind::Sgd) => OptimizerState {
                step: s.step,
                m: Vec::new(),
                v: Vec::new(),
            },
            _ => OptimizerState::fresh(config.optimizer, n),
        };
        Trainer {
            params: ckpt.params,
            state,
            config,
            tokenizer,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn checkpoint(&self, epoch: usize, best_valid_loss: Option<f64>) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: Some(self.state.clone()),
            epoch,
            best_valid_loss,
        }
    }

    fn trainable_start(&self) -> usize {
        match self.config.phase {
            Phase::Warmup => self.params.encoder_range().end,
            Phase::Finetune => 0,
        }
    }

    pub fn encode(&self, entry: &DictEntry) -> Result<Example, TokenizerError> {
        encode_entry(self.tokenizer, entry, self.params.config().max_positions)
    }

    /// One update on the token-mean NLL of `batch`. Returns the batch loss
    /// measured before the update.
    pub fn train_step(&mut self, batch: &[DictEntry]) -> Result<f64, TrainError> {
        let examples = batch
            .iter()
            .map(|e| self.encode(e))
            .collect::<Result<Vec<_>, _>>()?;
        self.train_step_examples(&examples)
    }

    pub fn train_step_examples(&mut self, batch: &[Example]) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let padded = pad_batch(batch);
        let tokens: usize = padded
            .iter()
            .map(|e| e.target.iter().filter(|&&t| t != PAD_ID).count())
            .sum();
        if tokens == 0 {
            return Err(TrainError::EmptyBatch);
        }
        let scale = 1.0 / tokens as f64;
        let train_encoder = self.config.phase == Phase::Finetune;
        let mut grad = vec![0.0; self.params.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.state.step + 1);
        let mut total = 0.0;
        for ex in &padded {
            let mut opts = PassOptions {
                rng: Some(&mut rng),
                train_encoder,
            };
            total += accumulate_gradient(&self.params, ex, scale, &mut grad, &mut opts)?.0;
        }
        let loss = total / tokens as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                loss,
                step: self.state.step,
            });
        }

        let start = self.trainable_start();
        if let Some(max_norm) = self.config.grad_clip_norm {
            let norm = grad[start..].iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max_norm {
                let k = max_norm / norm;
                grad[start..].iter_mut().for_each(|g| *g *= k);
            }
        }

        self.state.step += 1;
        let lr = self.config.learning_rate;
        let p = self.params.as_mut_slice();
        match self.config.optimizer {
            OptimizerKind::Sgd => {
                for i in start..p.len() {
                    p[i] -= lr * grad[i];
                }
            }
            OptimizerKind::Adam => {
                let t = self.state.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let (m, v) = (&mut self.state.m, &mut self.state.v);
                for i in start..p.len() {
                    let g = grad[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(loss)
    }
}

/// Token-mean NLL of `examples` in evaluation mode.
pub fn evaluate_loss(params: &ModelParams, examples: &[Example]) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut count = 0;
    for ex in examples {
        let logits = forward(params, &ex.input, &ex.prefix)?;
        let (s, c) = nll_sum(&logits, &ex.target)?;
        sum += s;
        count += c;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub fn encode_dataset(
    tokenizer: &SubwordTokenizer,
    dataset: &Dataset,
    max_positions: usize,
) -> Result<Vec<Example>, TokenizerError> {
    dataset
        .entries()
        .iter()
        .map(|e| encode_entry(tokenizer, e, max_positions))
        .collect()
}

/// Length-bucketed mini-batches: examples are shuffled, stably sorted by
/// total length, cut into batches bounded by `batch_size` and the padded
/// `max_tokens` budget, and the batch order is shuffled.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    max_tokens: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let len = |i: usize| examples[i].input.len() + examples[i].prefix.len();
    order.sort_by_key(|&i| len(i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut widest = 0;
    for i in order {
        let w = widest.max(len(i));
        if !current.is_empty() && (current.len() >= batch_size.max(1) || w * (current.len() + 1) > max_tokens) {
            batches.push(std::mem::take(&mut current));
            widest = 0;
        }
        widest = widest.max(len(i));
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(rng);
    batches
}

/// One structured training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// Runs one phase to completion (epoch budget or early stop) and returns the
/// best-validation checkpoint.
pub fn run_phase(
    params: ModelParams,
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
    tokenizer: &SubwordTokenizer,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<PhaseOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptyDataset("valid"));
    }
    let max_pos = params.config().max_positions;
    let train_ex = encode_dataset(tokenizer, train, max_pos)?;
    let valid_ex = encode_dataset(tokenizer, valid, max_pos)?;
    let mut trainer = Trainer::new(params, config.clone(), tokenizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);

    let mut best: Option<(f64, Checkpoint)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let mut weighted = 0.0;
        let mut tokens = 0usize;
        for batch in make_batches(&train_ex, config.batch_size, config.max_tokens, &mut rng) {
            let exs: Vec<Example> = batch.iter().map(|&i| train_ex[i].clone()).collect();
            let n: usize = exs.iter().map(|e| e.target.len()).sum();
            weighted += trainer.train_step_examples(&exs)? * n as f64;
            tokens += n;
        }
        let valid_loss = evaluate_loss(trainer.params(), &valid_ex)?;
        let log = EpochLog {
            phase: config.phase,
            epoch,
            train_loss: weighted / tokens.max(1) as f64,
            valid_loss,
            lr: config.learning_rate,
        };
        on_epoch(&log);
        history.push(log);
        if best.as_ref().is_none_or(|(b, _)| valid_loss < *b) {
            best = Some((valid_loss, trainer.checkpoint(epoch, Some(valid_loss))));
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    let checkpoint = match best {
        Some((_, ckpt)) => ckpt,
        None => trainer.checkpoint(0, None),
    };
    Ok(PhaseOutcome {
        checkpoint,
        history,
    })
}

/// Warm-up followed by fine-tuning from the warm-up's best checkpoint with a
/// fresh optimizer.
pub fn run_two_phase(
    params: ModelParams,
    train: &Dataset,
    valid: &Dataset,
    warmup: &TrainConfig,
    finetune: &TrainConfig,
    tokenizer: &SubwordTokenizer,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(PhaseOutcome, PhaseOutcome), TrainError> {
    let first = run_phase(params, train, valid, warmup, tokenizer, on_epoch)?;
    let second = run_phase(first.checkpoint.params.clone(), train, valid, finetune, tokenizer, on_epoch)?;
    Ok((first, second))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    epoch: usize,
    best_valid_loss: Option<f64>,
    param_count: usize,
    optimizer_step: Option<u64>,
    has_moments: bool,
}

fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> io::Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(input: &mut R, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = [0u8; 8];
    (0..n)
        .map(|_| {
            input.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        })
        .collect()
}

/// Binary layout: magic, `u32` version, `u64` header length, JSON header,
/// then the parameters and optional Adam moments as little-endian `f64`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let mut out = BufWriter::new(File::create(path)?);
    let has_moments = ckpt.optimizer.as_ref().is_some_and(|o| !o.m.is_empty());
    let header = CheckpointHeader {
        config: ckpt.config().clone(),
        epoch: ckpt.epoch,
        best_valid_loss: ckpt.best_valid_loss.filter(|v| v.is_finite()),
        param_count: ckpt.params.len(),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        has_moments,
    };
    let header = serde_json::to_vec(&header).map_err(|e| TrainError::Format(e.to_string()))?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    write_f64s(&mut out, ckpt.params.as_slice())?;
    if let (true, Some(opt)) = (has_moments, &ckpt.optimizer) {
        write_f64s(&mut out, &opt.m)?;
        write_f64s(&mut out, &opt.v)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Format("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(TrainError::Format("header too large".into()));
    }
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header).map_err(|e| TrainError::Format(e.to_string()))?;
    let data = read_f64s(&mut input, header.param_count)?;
    let params = ModelParams::from_vec(header.config, data)?;
    let optimizer = match (header.optimizer_step, header.has_moments) {
        (Some(step), true) => Some(OptimizerState {
            step,
            m: read_f64s(&mut input, header.param_count)?,
            v: read_f64s(&mut input, header.param_count)?,
        }),
        (Some(step), false) => Some(OptimizerState {
            step,
            m: Vec::new(),
            v: Vec::new(),
        }),
        (None, _) => None,
    };
    Ok(Checkpoint {
        params,
        optimizer,
        epoch: header.epoch,
        best_valid_loss: header.best_valid_loss,
    })
}
