//! Transformer encoder-decoder for definition generation.
//!
//! Encoder input vectors are `token + position + segment` embeddings of the
//! `[LANG] word [SEP] context [EOS]` sequence; decoder inputs use token and
//! position embeddings only. Both stacks are pre-norm with a final layer
//! norm, and the output projection is untied from the token table.
//!
//! All trainable weights live in one flat `f64` buffer. Encoder-side tensors
//! (the three embedding tables, the encoder layers and the encoder's final
//! norm) occupy a prefix of that buffer so that freezing the encoder is a
//! range check.

mod layout;
mod network;
pub mod ops;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tokenizer::{InputEncoding, PAD_ID};

pub use layout::{Layout, TensorSpec};
pub use network::{EncoderOutput, PassOptions};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("index out of bounds: {0}")]
    IndexOutOfBounds(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("target prefix must be non-empty")]
    EmptyPrefix,
    #[error("target has {target} tokens but there are {rows} logit rows")]
    LengthMismatch { target: usize, rows: usize },
    #[error("parameter buffer has {found} values, configuration needs {expected}")]
    ShapeMismatch { found: usize, expected: usize },
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "two")]
    pub n_segments: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn two() -> usize {
    2
}

impl ModelConfig {
    /// Desk-scale default: 128-wide, 4 heads, 2 encoder and 2 decoder layers.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 512,
            vocab_size,
            max_positions: 128,
            n_segments: 2,
            dropout: 0.1,
        }
    }

    /// Small enough for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ff: 16,
            vocab_size,
            max_positions: 32,
            n_segments: 2,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_segments != 2 {
            return bad(format!("n_segments must be 2, got {}", self.n_segments));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Every trainable weight, in the order given by [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn from_vec(config: ModelConfig, data: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(ModelError::ShapeMismatch {
                found: data.len(),
                expected: layout.total,
            });
        }
        Ok(ModelParams {
            config,
            layout,
            data,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let data = vec![0.0; layout.total];
        Ok(ModelParams {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Buffer range of the encoder-side parameters.
    pub fn encoder_range(&self) -> Range<usize> {
        0..self.layout.encoder_end
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|t| &self.data[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.find(name)?.range();
        Some(&mut self.data[range])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Xavier-uniform matrices, unit layer-norm gains, zero biases, and
/// embeddings drawn from `N(0, 1/3)` so that their three-way sum has unit
/// variance.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    let mut params = ModelParams::zeros(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed_dist = Normal::new(0.0, (1.0f64 / 3.0).sqrt()).expect("valid normal");
    let specs = params.layout.tensors.clone();
    for spec in specs {
        let slot = &mut params.data[spec.range()];
        match spec.kind {
            layout::TensorKind::Embedding => {
                slot.iter_mut().for_each(|v| *v = embed_dist.sample(&mut rng));
            }
            layout::TensorKind::Weight => {
                let a = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
                slot.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
            }
            layout::TensorKind::Gain => slot.iter_mut().for_each(|v| *v = 1.0),
            layout::TensorKind::Bias => {}
        }
    }
    Ok(params)
}

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn check_indices(params: &ModelParams, encoding: &InputEncoding) -> Result<(), ModelError> {
    let cfg = &params.config;
    let n = encoding.token_ids.len();
    if encoding.position_ids.len() != n || encoding.segment_ids.len() != n {
        return Err(ModelError::IndexOutOfBounds(
            "token, position and segment sequences differ in length".into(),
        ));
    }
    if n > cfg.max_positions {
        return Err(ModelError::SequenceTooLong {
            len: n,
            max: cfg.max_positions,
        });
    }
    for i in 0..n {
        if encoding.token_ids[i] as usize >= cfg.vocab_size {
            return Err(ModelError::IndexOutOfBounds(format!(
                "token id {} at {i} (vocab {})",
                encoding.token_ids[i], cfg.vocab_size
            )));
        }
        if encoding.position_ids[i] as usize >= cfg.max_positions {
            return Err(ModelError::IndexOutOfBounds(format!(
                "position id {} at {i}",
                encoding.position_ids[i]
            )));
        }
        if encoding.segment_ids[i] as usize >= cfg.n_segments {
            return Err(ModelError::IndexOutOfBounds(format!(
                "segment id {} at {i}",
                encoding.segment_ids[i]
            )));
        }
    }
    Ok(())
}

/// `x_i = tok[token_ids[i]] + pos[position_ids[i]] + seg[segment_ids[i]]`.
pub fn embed(params: &ModelParams, encoding: &InputEncoding) -> Result<Matrix, ModelError> {
    check_indices(params, encoding)?;
    let d = params.config.d_model;
    let l = &params.layout;
    let p = &params.data;
    let n = encoding.token_ids.len();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let t = l.tok + encoding.token_ids[i] as usize * d;
        let q = l.pos + encoding.position_ids[i] as usize * d;
        let s = l.seg + encoding.segment_ids[i] as usize * d;
        for j in 0..d {
            out[i * d + j] = p[t + j] + p[q + j] + p[s + j];
        }
    }
    Ok(Matrix::new(n, d, out))
}

fn check_prefix(params: &ModelParams, prefix: &[u32]) -> Result<(), ModelError> {
    let cfg = &params.config;
    if prefix.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    if prefix.len() > cfg.max_positions {
        return Err(ModelError::SequenceTooLong {
            len: prefix.len(),
            max: cfg.max_positions,
        });
    }
    if let Some(bad) = prefix.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::IndexOutOfBounds(format!("target token id {bad}")));
    }
    Ok(())
}

/// Runs the encoder in evaluation mode.
pub fn encode(params: &ModelParams, input: &InputEncoding) -> Result<EncoderOutput, ModelError> {
    check_indices(params, input)?;
    Ok(network::encode_eval(params, input))
}

/// Decoder logits for every position of `target_prefix` given encoder output.
pub fn decode_logits(
    params: &ModelParams,
    encoded: &EncoderOutput,
    target_prefix: &[u32],
) -> Result<Matrix, ModelError> {
    check_prefix(params, target_prefix)?;
    Ok(network::decode_eval(params, encoded, target_prefix))
}

/// Evaluation-mode logits, `len(target_prefix) × vocab_size`.
pub fn forward(
    params: &ModelParams,
    input: &InputEncoding,
    target_prefix: &[u32],
) -> Result<Matrix, ModelError> {
    let encoded = encode(params, input)?;
    decode_logits(params, &encoded, target_prefix)
}

/// Mean over non-PAD targets of `-log softmax(logits)[target]`.
pub fn nll_loss(logits: &Matrix, target: &[u32]) -> Result<f64, ModelError> {
    let (sum, count) = nll_sum(logits, target)?;
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Summed NLL and the number of counted (non-PAD) positions.
pub fn nll_sum(logits: &Matrix, target: &[u32]) -> Result<(f64, usize), ModelError> {
    if target.len() != logits.rows {
        return Err(ModelError::LengthMismatch {
            target: target.len(),
            rows: logits.rows,
        });
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (i, &t) in target.iter().enumerate() {
        if t == PAD_ID {
            continue;
        }
        if t as usize >= logits.cols {
            return Err(ModelError::IndexOutOfBounds(format!("target id {t}")));
        }
        sum -= ops::log_softmax(logits.row(i))[t as usize];
        count += 1;
    }
    Ok((sum, count))
}

/// One training pair: encoder input, decoder input and decoder target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: InputEncoding,
    pub prefix: Vec<u32>,
    pub target: Vec<u32>,
}

/// Adds `scale · ∂(summed NLL)/∂θ` into `grad` and returns the summed NLL
/// with its token count. Dropout is applied when `options.rng` is set.
pub fn accumulate_gradient(
    params: &ModelParams,
    example: &Example,
    scale: f64,
    grad: &mut [f64],
    options: &mut PassOptions<'_>,
) -> Result<(f64, usize), ModelError> {
    check_indices(params, &example.input)?;
    check_prefix(params, &example.prefix)?;
    if example.prefix.len() != example.target.len() {
        return Err(ModelError::LengthMismatch {
            target: example.target.len(),
            rows: example.prefix.len(),
        });
    }
    assert_eq!(grad.len(), params.len());
    Ok(network::loss_and_grad(params, example, scale, grad, options))
}

/// Draws a dropout keep-mask; exposed for seeding consistency in tests.
pub(crate) fn dropout_mask(rng: &mut impl Rng, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoding(tokens: &[u32], segments: &[u8]) -> InputEncoding {
        InputEncoding {
            token_ids: tokens.to_vec(),
            position_ids: (0..tokens.len() as u32).collect(),
            segment_ids: segments.to_vec(),
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::tiny(10).validate().is_ok());
        let mut c = ModelConfig::tiny(10);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
        let mut c = ModelConfig::tiny(10);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(init_params(&c, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let mut cfg = ModelConfig::tiny(12);
        cfg.d_model = 8;
        cfg.n_heads = 2;
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_ne!(a.as_slice(), init_params(&cfg, 8).unwrap().as_slice());
        assert_eq!(a.tensor("token_embedding").unwrap().len(), 12 * 8);
        assert_eq!(a.tensor("segment_embedding").unwrap().len(), 2 * 8);
        assert_eq!(a.tensor("encoder.0.self_attn.q.weight").unwrap().len(), 64);
        assert_eq!(a.tensor("decoder.0.ffn.up.weight").unwrap().len(), 8 * 16);
        assert_eq!(a.tensor("output.weight").unwrap().len(), 8 * 12);
        assert!(a.all_finite());
    }

    #[test]
    fn embed_constant_tables() {
        let cfg = ModelConfig::tiny(6);
        let mut p = ModelParams::zeros(cfg).unwrap();
        p.tensor_mut("token_embedding").unwrap().fill(1.0);
        p.tensor_mut("position_embedding").unwrap().fill(2.0);
        p.tensor_mut("segment_embedding").unwrap().fill(3.0);
        let x = embed(&p, &encoding(&[5, 1, 4, 2], &[0, 0, 1, 1])).unwrap();
        assert!(x.data.iter().all(|&v| v == 6.0));

        let zero = ModelParams::zeros(ModelConfig::tiny(6)).unwrap();
        let x = embed(&zero, &encoding(&[1, 2], &[0, 1])).unwrap();
        assert!(x.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_bounds() {
        let p = ModelParams::zeros(ModelConfig::tiny(6)).unwrap();
        assert!(matches!(
            embed(&p, &encoding(&[6], &[0])),
            Err(ModelError::IndexOutOfBounds(_))
        ));
        assert!(matches!(
            embed(&p, &encoding(&[1], &[2])),
            Err(ModelError::IndexOutOfBounds(_))
        ));
        let long = vec![1u32; 33];
        let segs = vec![0u8; 33];
        assert!(matches!(
            embed(&p, &encoding(&long, &segs)),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn loss_cases() {
        let v = 9;
        let uniform = Matrix::new(3, v, vec![0.25; 3 * v]);
        let loss = nll_loss(&uniform, &[1, 4, 8]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);

        let mut sat = vec![0.0; 3 * v];
        for (i, t) in [1usize, 4, 8].iter().enumerate() {
            sat[i * v + t] = 1e4;
        }
        let loss = nll_loss(&Matrix::new(3, v, sat), &[1, 4, 8]).unwrap();
        assert!(loss < 1e-6);

        assert!(matches!(
            nll_loss(&uniform, &[1, 2]),
            Err(ModelError::LengthMismatch { .. })
        ));
        // PAD targets are excluded.
        let l2 = nll_loss(&uniform, &[1, PAD_ID, PAD_ID]).unwrap();
        assert!((l2 - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_logsumexp() {
        let logits = Matrix::new(
            3,
            4,
            vec![0.3, -1.2, 2.0, 0.1, 1.5, 1.5, -0.5, 0.0, -2.0, 0.7, 0.2, 3.1],
        );
        let target = [2u32, 1, 3];
        let mut expected = 0.0;
        for (i, &t) in target.iter().enumerate() {
            let row = logits.row(i);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expected += lse - row[t as usize];
        }
        expected /= 3.0;
        assert!((nll_loss(&logits, &target).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn forward_rejects_bad_prefix() {
        let p = init_params(&ModelConfig::tiny(10), 1).unwrap();
        let enc = encoding(&[5, 6, 4, 7, 3], &[0, 0, 1, 1, 1]);
        assert!(matches!(forward(&p, &enc, &[]), Err(ModelError::EmptyPrefix)));
        assert!(matches!(
            forward(&p, &enc, &[5; 40]),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }
}
