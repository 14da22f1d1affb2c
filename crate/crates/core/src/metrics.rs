//! Corpus BLEU and NIST, and aggregation of 1–5 manual scores.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::decoding::{generate, DecodeError, GenerationSpec};
use crate::lang::{segment, Lang};
use crate::model::ModelParams;
use crate::tokenizer::SubwordTokenizer;

pub const BLEU_MAX_N: usize = 4;
pub const NIST_MAX_N: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("empty score sheet")]
    EmptySheet,
    #[error("score {score} out of range 1..=5 at row {row}")]
    ScoreOutOfRange { row: usize, score: i64 },
    #[error("score sheet: {0}")]
    Sheet(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

type Counts<'a> = HashMap<&'a [&'a str], usize>;

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> Counts<'a> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn check_lengths<T>(hyps: &[T], refs: &[T]) -> Result<(), MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hypotheses: hyps.len(),
            references: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(())
}

/// Corpus BLEU on pre-tokenized text, in `[0, 100]`.
///
/// Orders for which the hypotheses contain no n-gram at all are left out of
/// the geometric mean; an order with n-grams but no match gives 0.
pub fn bleu_tokens(hyps: &[Vec<&str>], refs: &[Vec<&str>], max_n: usize) -> Result<f64, MetricError> {
    check_lengths(hyps, refs)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &c) in &hc {
                matched[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..max_n {
        if total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        orders += 1;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// `β` such that the brevity factor is 0.5 at a length ratio of 2/3.
pub fn nist_beta() -> f64 {
    0.5f64.ln() / 1.5f64.ln().powi(2)
}

/// N-gram counts over a reference corpus, for NIST information weights.
pub struct ReferenceStats<'a> {
    words: usize,
    counts: Vec<Counts<'a>>,
}

impl<'a> ReferenceStats<'a> {
    pub fn new(refs: &'a [Vec<&'a str>], max_n: usize) -> Self {
        let mut counts: Vec<Counts<'a>> = vec![HashMap::new(); max_n + 1];
        for r in refs {
            for (n, table) in counts.iter_mut().enumerate().skip(1) {
                for (gram, c) in ngram_counts(r, n) {
                    *table.entry(gram).or_insert(0) += c;
                }
            }
        }
        ReferenceStats {
            words: refs.iter().map(Vec::len).sum(),
            counts,
        }
    }

    pub fn count(&self, gram: &[&str]) -> usize {
        if gram.is_empty() {
            return self.words;
        }
        self.counts
            .get(gram.len())
            .and_then(|t| t.get(gram))
            .copied()
            .unwrap_or(0)
    }

    /// `log2(count(w1..wn-1) / count(w1..wn))`, the empty prefix counting
    /// every reference word.
    pub fn information(&self, gram: &[&str]) -> f64 {
        (self.count(&gram[..gram.len() - 1]) as f64 / self.count(gram) as f64).log2()
    }
}

/// Corpus NIST on pre-tokenized text.
pub fn nist_tokens(hyps: &[Vec<&str>], refs: &[Vec<&str>], max_n: usize) -> Result<f64, MetricError> {
    check_lengths(hyps, refs)?;
    let ref_words: usize = refs.iter().map(Vec::len).sum();
    let hyp_words: usize = hyps.iter().map(Vec::len).sum();
    if hyp_words == 0 || ref_words == 0 {
        return Ok(0.0);
    }
    let stats = ReferenceStats::new(refs, max_n);
    let mut score = 0.0;
    for n in 1..=max_n {
        let mut weighted = 0.0;
        let mut total = 0usize;
        for (h, r) in hyps.iter().zip(refs) {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &c) in &hc {
                total += c;
                let m = c.min(rc.get(gram).copied().unwrap_or(0));
                if m > 0 {
                    weighted += m as f64 * stats.information(gram);
                }
            }
        }
        if total > 0 {
            score += weighted / total as f64;
        }
    }
    let ratio = (hyp_words as f64 / ref_words as f64).min(1.0);
    Ok(score * (nist_beta() * ratio.ln().powi(2)).exp())
}

fn tokenize_all<'a, S: AsRef<str>>(texts: &'a [S], lang: &Lang) -> Vec<Vec<&'a str>> {
    texts.iter().map(|t| segment(t.as_ref(), lang)).collect()
}

/// Corpus BLEU over raw text, segmented by `lang`'s evaluation rule.
pub fn corpus_bleu<S: AsRef<str>>(hyps: &[S], refs: &[S], lang: &Lang, max_n: usize) -> Result<f64, MetricError> {
    bleu_tokens(&tokenize_all(hyps, lang), &tokenize_all(refs, lang), max_n)
}

/// Corpus NIST over raw text, segmented by `lang`'s evaluation rule.
pub fn corpus_nist<S: AsRef<str>>(hyps: &[S], refs: &[S], lang: &Lang, max_n: usize) -> Result<f64, MetricError> {
    nist_tokens(&tokenize_all(hyps, lang), &tokenize_all(refs, lang), max_n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryScore {
    pub index: usize,
    pub word: String,
    pub hypothesis: String,
    pub reference: String,
    pub bleu: f64,
    pub nist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_bleu: f64,
    pub corpus_nist: f64,
    pub per_entry: Vec<EntryScore>,
}

/// Scores `generator` on every entry of `test`; each side is segmented by
/// the entry's target language.
pub fn evaluate_with<F>(test: &Dataset, mut generator: F) -> Result<EvalReport, MetricError>
where
    F: FnMut(&crate::corpus::DictEntry) -> Result<String, MetricError>,
{
    if test.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut hyps = Vec::with_capacity(test.len());
    for entry in test.entries() {
        hyps.push(generator(entry)?);
    }
    let entries = test.entries();
    let hyp_tokens: Vec<Vec<&str>> = hyps
        .iter()
        .zip(entries)
        .map(|(h, e)| segment(h, &e.target_lang))
        .collect();
    let ref_tokens: Vec<Vec<&str>> = entries
        .iter()
        .map(|e| segment(&e.definition, &e.target_lang))
        .collect();
    let mut per_entry = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let h = std::slice::from_ref(&hyp_tokens[i]);
        let r = std::slice::from_ref(&ref_tokens[i]);
        per_entry.push(EntryScore {
            index: i,
            word: e.word.clone(),
            hypothesis: hyps[i].clone(),
            reference: e.definition.clone(),
            bleu: bleu_tokens(h, r, BLEU_MAX_N)?,
            nist: nist_tokens(h, r, NIST_MAX_N)?,
        });
    }
    Ok(EvalReport {
        corpus_bleu: bleu_tokens(&hyp_tokens, &ref_tokens, BLEU_MAX_N)?,
        corpus_nist: nist_tokens(&hyp_tokens, &ref_tokens, NIST_MAX_N)?,
        per_entry,
    })
}

/// Generates a definition for every test entry (output language taken from
/// the entry) and scores it against the gold definition.
pub fn evaluate_model(
    params: &ModelParams,
    test: &Dataset,
    spec: &GenerationSpec,
    tokenizer: &SubwordTokenizer,
) -> Result<EvalReport, MetricError> {
    let max_pos = params.config().max_positions;
    evaluate_with(test, |entry| {
        let input = tokenizer
            .build_input_sequence(&entry.word, &entry.context, &entry.source_lang)
            .map_err(DecodeError::from)?;
        let input = crate::training::fit_input(input, max_pos);
        let spec = GenerationSpec {
            output_lang: entry.target_lang.clone(),
            ..spec.clone()
        };
        Ok(generate(params, &input, &spec, tokenizer)?)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Accuracy,
    Fluency,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualScore {
    pub model: String,
    pub scorer: String,
    pub criterion: Criterion,
    pub entry: String,
    pub score: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManualScoreSheet {
    pub scores: Vec<ManualScore>,
}

#[derive(Deserialize)]
struct SheetRow {
    model: String,
    scorer: String,
    criterion: Criterion,
    entry: String,
    score: i64,
}

impl ManualScoreSheet {
    /// CSV with header `model,scorer,criterion,entry,score`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, MetricError> {
        let mut scores = Vec::new();
        for (i, row) in csv::Reader::from_reader(reader).deserialize::<SheetRow>().enumerate() {
            let row = row.map_err(|e| MetricError::Sheet(e.to_string()))?;
            if !(1..=5).contains(&row.score) {
                return Err(MetricError::ScoreOutOfRange {
                    row: i + 2,
                    score: row.score,
                });
            }
            scores.push(ManualScore {
                model: row.model,
                scorer: row.scorer,
                criterion: row.criterion,
                entry: row.entry,
                score: row.score as u8,
            });
        }
        Ok(ManualScoreSheet { scores })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricError> {
        let file = std::fs::File::open(path).map_err(|e| MetricError::Sheet(e.to_string()))?;
        Self::from_csv(file)
    }
}

/// A value in hundredths, e.g. `Hundredths(256)` is 2.56.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "f64")]
pub struct Hundredths(pub i64);

impl Hundredths {
    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Half-up rounding of the non-negative fraction `num / den`.
    pub fn round_half_up(num: i128, den: i128) -> Self {
        assert!(den > 0 && num >= 0);
        Hundredths(((200 * num + den) / (2 * den)) as i64)
    }
}

impl From<Hundredths> for f64 {
    fn from(h: Hundredths) -> f64 {
        h.as_f64()
    }
}

impl fmt::Display for Hundredths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManualSummary {
    pub model: String,
    pub criterion: Criterion,
    pub scorer_means: BTreeMap<String, Hundredths>,
    pub overall: Hundredths,
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Mean of already-rounded per-scorer means, itself rounded half-up.
pub fn overall_from_scorer_means(means: &[Hundredths]) -> Option<Hundredths> {
    if means.is_empty() {
        return None;
    }
    let sum: i128 = means.iter().map(|m| m.0 as i128).sum();
    Some(Hundredths::round_half_up(sum, 100 * means.len() as i128))
}

/// Per-(model, criterion) scorer means and their overall mean. The overall
/// mean is taken over the exact per-scorer means, then rounded.
pub fn aggregate_manual(sheet: &ManualScoreSheet) -> Result<Vec<ManualSummary>, MetricError> {
    if sheet.scores.is_empty() {
        return Err(MetricError::EmptySheet);
    }
    // (model, criterion) -> scorer -> (score sum, count)
    type Cells<'a> = BTreeMap<&'a str, (i128, i128)>;
    let mut groups: BTreeMap<(&str, Criterion), Cells> = BTreeMap::new();
    for s in &sheet.scores {
        let cell = groups
            .entry((s.model.as_str(), s.criterion))
            .or_default()
            .entry(s.scorer.as_str())
            .or_insert((0, 0));
        cell.0 += s.score as i128;
        cell.1 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|((model, criterion), scorers)| {
            // Σ sum_i / count_i as one exact fraction.
            let (mut num, mut den) = (0i128, 1i128);
            for &(sum, count) in scorers.values() {
                num = num * count + sum * den;
                den *= count;
                let g = gcd(num, den);
                num /= g;
                den /= g;
            }
            den *= scorers.len() as i128;
            ManualSummary {
                model: model.to_string(),
                criterion,
                scorer_means: scorers
                    .iter()
                    .map(|(name, &(sum, count))| (name.to_string(), Hundredths::round_half_up(sum, count)))
                    .collect(),
                overall: Hundredths::round_half_up(num, den),
            }
        })
        .collect())
}
