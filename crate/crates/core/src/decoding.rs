//! Greedy and length-normalized beam search over the decoder.

use serde::{Deserialize, Serialize};

use crate::lang::Lang;
use crate::model::ops::log_softmax;
use crate::model::{decode_logits, encode, EncoderOutput, ModelError, ModelParams};
use crate::tokenizer::{InputEncoding, SubwordTokenizer, Token, TokenizerError, EOS_ID};

pub const DEFAULT_BEAM_WIDTH: usize = 4;
pub const DEFAULT_MAX_LEN: usize = 48;

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("invalid generation spec: {0}")]
    InvalidSpec(String),
    #[error("index 0 does not hold a language prompt")]
    NotAPromptPosition,
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub strategy: Strategy,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
    /// EOS is not allowed before this many tokens have been generated.
    pub min_len: usize,
    pub output_lang: Lang,
    pub length_penalty: f64,
}

impl GenerationSpec {
    pub fn new(output_lang: Lang) -> Self {
        GenerationSpec {
            strategy: Strategy::Beam {
                width: DEFAULT_BEAM_WIDTH,
            },
            max_len: DEFAULT_MAX_LEN,
            min_len: 1,
            output_lang,
            length_penalty: 1.0,
        }
    }

    pub fn greedy(output_lang: Lang) -> Self {
        GenerationSpec {
            strategy: Strategy::Greedy,
            ..Self::new(output_lang)
        }
    }

    pub fn beam(output_lang: Lang, width: usize) -> Self {
        GenerationSpec {
            strategy: Strategy::Beam { width },
            ..Self::new(output_lang)
        }
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.max_len == 0 {
            return Err(DecodeError::InvalidSpec("max_len must be at least 1".into()));
        }
        if let Strategy::Beam { width: 0 } = self.strategy {
            return Err(DecodeError::InvalidSpec("beam width must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() || self.length_penalty < 0.0 {
            return Err(DecodeError::InvalidSpec("length_penalty must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// A generated continuation, not including the output prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, without the trailing EOS.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated length including EOS when finished.
    pub fn length(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// `logprob / length^alpha`.
    pub fn score(&self, alpha: f64) -> f64 {
        let n = self.length();
        if n == 0 {
            self.logprob
        } else {
            self.logprob / (n as f64).powf(alpha)
        }
    }
}

/// Returns `input` with the prompt at index 0 replaced by `input_lang`'s.
pub fn switch_language_prompt(
    input: &InputEncoding,
    input_lang: &Lang,
    tokenizer: &SubwordTokenizer,
) -> Result<InputEncoding, DecodeError> {
    match input.token_ids.first() {
        Some(&id) if tokenizer.vocab().is_prompt(id) => {}
        _ => return Err(DecodeError::NotAPromptPosition),
    }
    let mut out = input.clone();
    out.token_ids[0] = tokenizer.prompt_id(input_lang)?;
    Ok(out)
}

struct Decoder<'a> {
    params: &'a ModelParams,
    encoded: EncoderOutput,
    prompt: u32,
    /// Ids that may be generated other than EOS.
    allowed: Vec<bool>,
    max_len: usize,
    min_len: usize,
}

impl Decoder<'_> {
    fn next_logprobs(&self, prefix_body: &[u32]) -> Result<Vec<f64>, DecodeError> {
        let mut prefix = Vec::with_capacity(prefix_body.len() + 1);
        prefix.push(self.prompt);
        prefix.extend_from_slice(prefix_body);
        let logits = decode_logits(self.params, &self.encoded, &prefix)?;
        Ok(log_softmax(logits.row(logits.rows - 1)))
    }

    fn may_emit(&self, id: usize, generated: usize) -> bool {
        if id == EOS_ID as usize {
            generated >= self.min_len
        } else {
            self.allowed[id]
        }
    }

    fn greedy(&self) -> Result<Hypothesis, DecodeError> {
        let mut hyp = Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            finished: false,
        };
        while hyp.length() < self.max_len {
            let lp = self.next_logprobs(&hyp.tokens)?;
            let mut best: Option<(usize, f64)> = None;
            for (id, &v) in lp.iter().enumerate() {
                if self.may_emit(id, hyp.tokens.len()) && best.is_none_or(|(_, b)| v > b) {
                    best = Some((id, v));
                }
            }
            let Some((id, v)) = best else { break };
            hyp.logprob += v;
            if id == EOS_ID as usize {
                hyp.finished = true;
                break;
            }
            hyp.tokens.push(id as u32);
        }
        Ok(hyp)
    }

    /// Plain beam search: the top `width` extensions by summed log-probability
    /// survive each step (ties to the lower token id, then the earlier beam);
    /// extensions ending in EOS are set aside as finished.
    fn beam(&self, width: usize, alpha: f64) -> Result<Hypothesis, DecodeError> {
        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            finished: false,
        }];
        let mut done: Vec<Hypothesis> = Vec::new();
        for step in 0..self.max_len {
            let mut candidates: Vec<(f64, u32, usize)> = Vec::new();
            for (b, hyp) in live.iter().enumerate() {
                let lp = self.next_logprobs(&hyp.tokens)?;
                for (id, &v) in lp.iter().enumerate() {
                    if self.may_emit(id, step) {
                        candidates.push((hyp.logprob + v, id as u32, b));
                    }
                }
            }
            candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            candidates.truncate(width);
            let mut next = Vec::with_capacity(width);
            for (logprob, id, b) in candidates {
                let mut tokens = live[b].tokens.clone();
                if id == EOS_ID {
                    done.push(Hypothesis {
                        tokens,
                        logprob,
                        finished: true,
                    });
                } else {
                    tokens.push(id);
                    next.push(Hypothesis {
                        tokens,
                        logprob,
                        finished: false,
                    });
                }
            }
            live = next;
            if live.is_empty() {
                break;
            }
        }
        done.extend(live);
        Ok(pick_best(done, alpha))
    }
}

/// Highest normalized score; the first of equals wins.
fn pick_best(hyps: Vec<Hypothesis>, alpha: f64) -> Hypothesis {
    let mut best: Option<Hypothesis> = None;
    for h in hyps {
        if best.as_ref().is_none_or(|b| h.score(alpha) > b.score(alpha)) {
            best = Some(h);
        }
    }
    best.unwrap_or(Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    })
}

/// Generated ids for `input`, prompt and EOS excluded.
///
/// Beam search of width `k` returns the best normalized hypothesis found by
/// any width `1..=k`, so widening the beam never lowers the returned score.
pub fn generate_hypothesis(
    params: &ModelParams,
    input: &InputEncoding,
    spec: &GenerationSpec,
    tokenizer: &SubwordTokenizer,
) -> Result<Hypothesis, DecodeError> {
    spec.validate()?;
    let prompt = tokenizer.prompt_id(&spec.output_lang)?;
    let vocab = tokenizer.vocab();
    let vocab_size = params.config().vocab_size;
    let allowed = (0..vocab_size)
        .map(|id| matches!(vocab.token(id as u32), Some(Token::Piece(_))))
        .collect();
    let decoder = Decoder {
        params,
        encoded: encode(params, input)?,
        prompt,
        allowed,
        max_len: spec.max_len.min(params.config().max_positions.saturating_sub(1)).max(1),
        min_len: spec.min_len,
    };
    match spec.strategy {
        Strategy::Greedy => decoder.greedy(),
        Strategy::Beam { width } => {
            let runs = (1..=width)
                .map(|w| decoder.beam(w, spec.length_penalty))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(pick_best(runs, spec.length_penalty))
        }
    }
}

/// Detokenized definition for `input`.
pub fn generate(
    params: &ModelParams,
    input: &InputEncoding,
    spec: &GenerationSpec,
    tokenizer: &SubwordTokenizer,
) -> Result<String, DecodeError> {
    let hyp = generate_hypothesis(params, input, spec, tokenizer)?;
    Ok(tokenizer.decode(&hyp.tokens)?)
}
