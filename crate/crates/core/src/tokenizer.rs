//! Byte-pair subword tokenizer and model input assembly.
//!
//! Words are split on whitespace; each word becomes a sequence of character
//! symbols whose last symbol carries an end-of-word mark. Merges are learned
//! greedily by pair frequency, with ties broken by the lexicographic order of
//! the pair. CJK text has no spaces, so each ideograph is simply a base symbol
//! and merges operate inside the run.
//!
//! Vocabulary layout: `<pad> <unk> <bos> <eos> <sep>`, then one `<lang:xx>`
//! prompt per supported language, then the alphabet, then merged symbols in
//! merge order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::lang::Lang;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const SEP_ID: u32 = 4;

const SPECIAL_NAMES: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];
const FILE_MAGIC: &str = "defgen-bpe";
pub const FILE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("cannot train a tokenizer on an empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary size {requested} is below the minimum {minimum} (alphabet + specials)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("token id {0} is outside the vocabulary")]
    IdOutOfRange(u32),
    #[error("language {0} has no prompt token")]
    UnknownLanguage(String),
    #[error("word and context must be non-empty")]
    EmptyInput,
    #[error("tokenizer file error: {0}")]
    Format(String),
    #[error("tokenizer file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A subword: its surface text and whether it closes a word.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Symbol {
    pub text: String,
    pub end_of_word: bool,
}

impl Symbol {
    fn concat(&self, right: &Symbol) -> Symbol {
        Symbol {
            text: format!("{}{}", self.text, right.text),
            end_of_word: right.end_of_word,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Special(String),
    Prompt(Lang),
    Piece(Symbol),
}

/// Id ↔ token tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<Token>,
    piece_to_id: HashMap<Symbol, u32>,
    prompt_ids: BTreeMap<Lang, u32>,
}

impl Vocabulary {
    fn new(langs: &[Lang]) -> Self {
        let mut vocab = Vocabulary {
            id_to_token: SPECIAL_NAMES
                .iter()
                .map(|s| Token::Special((*s).to_owned()))
                .collect(),
            piece_to_id: HashMap::new(),
            prompt_ids: BTreeMap::new(),
        };
        for lang in langs {
            if !vocab.prompt_ids.contains_key(lang) {
                let id = vocab.id_to_token.len() as u32;
                vocab.prompt_ids.insert(lang.clone(), id);
                vocab.id_to_token.push(Token::Prompt(lang.clone()));
            }
        }
        vocab
    }

    fn push_piece(&mut self, symbol: Symbol) -> u32 {
        if let Some(&id) = self.piece_to_id.get(&symbol) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.piece_to_id.insert(symbol.clone(), id);
        self.id_to_token.push(Token::Piece(symbol));
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&Token> {
        self.id_to_token.get(id as usize)
    }

    pub fn piece_id(&self, symbol: &Symbol) -> Option<u32> {
        self.piece_to_id.get(symbol).copied()
    }

    pub fn prompt_id(&self, lang: &Lang) -> Option<u32> {
        self.prompt_ids.get(lang).copied()
    }

    pub fn languages(&self) -> impl Iterator<Item = &Lang> {
        self.prompt_ids.keys()
    }

    pub fn is_prompt(&self, id: u32) -> bool {
        matches!(self.token(id), Some(Token::Prompt(_)))
    }

    /// Specials and prompts, i.e. every id that is not a text piece.
    pub fn is_control(&self, id: u32) -> bool {
        !matches!(self.token(id), Some(Token::Piece(_)))
    }

    /// Number of ids reserved ahead of the alphabet.
    pub fn reserved_count(&self) -> usize {
        SPECIAL_NAMES.len() + self.prompt_ids.len()
    }
}

/// Trained BPE model: vocabulary plus ordered merge rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordTokenizer {
    vocab: Vocabulary,
    alphabet_len: usize,
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
}

fn word_symbols(word: &str) -> Vec<Symbol> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| Symbol {
            text: c.to_string(),
            end_of_word: i == last,
        })
        .collect()
}

/// Minimum vocabulary size for `corpus` with the given prompt languages.
pub fn minimum_vocab_size(corpus: &[&str], langs: &[Lang]) -> usize {
    let chars: BTreeSet<char> = corpus
        .iter()
        .flat_map(|l| l.chars())
        .filter(|c| !c.is_whitespace())
        .collect();
    let n_langs = langs.iter().collect::<BTreeSet<_>>().len();
    SPECIAL_NAMES.len() + n_langs + 2 * chars.len()
}

/// Learns merges until `target_vocab_size` is reached or no adjacent pair
/// occurs more than once.
pub fn train_bpe(
    corpus: &[&str],
    target_vocab_size: usize,
    langs: &[Lang],
) -> Result<SubwordTokenizer, TokenizerError> {
    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for line in corpus {
        for word in line.split_whitespace() {
            *word_freq.entry(word).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let minimum = minimum_vocab_size(corpus, langs);
    if target_vocab_size < minimum {
        return Err(TokenizerError::VocabTooSmall {
            requested: target_vocab_size,
            minimum,
        });
    }

    let mut vocab = Vocabulary::new(langs);
    // Both the inner and the word-final form of every seen character.
    let chars: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    for c in &chars {
        for end_of_word in [false, true] {
            vocab.push_piece(Symbol {
                text: c.to_string(),
                end_of_word,
            });
        }
    }
    let alphabet_len = vocab.len() - vocab.reserved_count();

    let mut words: Vec<(Vec<u32>, usize)> = word_freq
        .iter()
        .map(|(w, f)| {
            let ids = word_symbols(w)
                .iter()
                .map(|s| vocab.piece_id(s).expect("alphabet covers corpus"))
                .collect();
            (ids, *f)
        })
        .collect();

    let mut merges = Vec::new();
    while vocab.len() < target_vocab_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (ids, freq) in &words {
            for pair in ids.windows(2) {
                *counts.entry((pair[0], pair[1])).or_default() += freq;
            }
        }
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // Lexicographically smaller pair wins the tie.
                    let key = |p: &(u32, u32)| (piece(&vocab, p.0), piece(&vocab, p.1));
                    key(pb).cmp(&key(pa))
                })
            })
            .map(|(p, _)| *p);
        let Some((left, right)) = best else { break };
        // Two different splits can yield the same symbol; the rule is kept
        // either way but the vocabulary only grows for new symbols.
        let merged = piece(&vocab, left).concat(piece(&vocab, right));
        let id = vocab.push_piece(merged);
        merges.push((left, right));
        for (ids, _) in &mut words {
            apply_merge(ids, left, right, id);
        }
    }

    Ok(SubwordTokenizer::from_parts(vocab, alphabet_len, merges))
}

fn piece(vocab: &Vocabulary, id: u32) -> &Symbol {
    match vocab.token(id) {
        Some(Token::Piece(s)) => s,
        _ => unreachable!("merge operand {id} is not a piece"),
    }
}

fn apply_merge(ids: &mut Vec<u32>, left: u32, right: u32, merged: u32) {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

/// Token ids with aligned position and segment indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputEncoding {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
}

impl InputEncoding {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Extends the encoding with PAD tokens up to `len`.
    pub fn padded(&self, len: usize) -> InputEncoding {
        let mut out = self.clone();
        while out.token_ids.len() < len {
            out.position_ids.push(out.token_ids.len() as u32);
            out.token_ids.push(PAD_ID);
            out.segment_ids.push(1);
        }
        out
    }
}

impl SubwordTokenizer {
    fn from_parts(vocab: Vocabulary, alphabet_len: usize, merges: Vec<(u32, u32)>) -> Self {
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let merged = piece(&vocab, l).concat(piece(&vocab, r));
            let id = vocab.piece_id(&merged).expect("merged symbol in vocabulary");
            merge_rank.entry((l, r)).or_insert((rank, id));
        }
        SubwordTokenizer {
            vocab,
            alphabet_len,
            merges,
            merge_rank,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn alphabet_len(&self) -> usize {
        self.alphabet_len
    }

    pub fn prompt_id(&self, lang: &Lang) -> Result<u32, TokenizerError> {
        self.vocab
            .prompt_id(lang)
            .ok_or_else(|| TokenizerError::UnknownLanguage(lang.to_string()))
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = word_symbols(word)
            .iter()
            .map(|s| self.vocab.piece_id(s).unwrap_or(UNK_ID))
            .collect();
        // Same result as walking the merge list in order, without visiting
        // rules whose operands are absent: jump to the next applicable rank.
        let mut last: Option<usize> = None;
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| {
                    self.merge_rank
                        .get(&(p[0], p[1]))
                        .filter(|(rank, _)| last.is_none_or(|l| *rank > l))
                        .map(|&(rank, m)| (rank, p[0], p[1], m))
                })
                .min();
            let Some((rank, l, r, m)) = best else { break };
            apply_merge(&mut ids, l, r, m);
            last = Some(rank);
        }
        out.extend(ids);
    }

    /// Subword ids of `text`; characters outside the alphabet become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut out);
        }
        out
    }

    /// Concatenates pieces, inserting a space after every word-final piece,
    /// and drops all special and prompt tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut text = String::new();
        for &id in ids {
            match self.vocab.token(id) {
                None => return Err(TokenizerError::IdOutOfRange(id)),
                Some(Token::Piece(s)) => {
                    text.push_str(&s.text);
                    if s.end_of_word {
                        text.push(' ');
                    }
                }
                Some(_) => {}
            }
        }
        while text.ends_with(' ') {
            text.pop();
        }
        Ok(text)
    }

    /// `[LANG] word [SEP] context [EOS]`, segment 0 up to the word's last
    /// piece and segment 1 from `[SEP]` on.
    pub fn build_input_sequence(
        &self,
        word: &str,
        context: &str,
        input_lang: &Lang,
    ) -> Result<InputEncoding, TokenizerError> {
        if word.trim().is_empty() || context.trim().is_empty() {
            return Err(TokenizerError::EmptyInput);
        }
        let prompt = self.prompt_id(input_lang)?;
        let mut token_ids = vec![prompt];
        token_ids.extend(self.encode(word));
        let word_span = token_ids.len();
        token_ids.push(SEP_ID);
        token_ids.extend(self.encode(context));
        token_ids.push(EOS_ID);
        let n = token_ids.len();
        Ok(InputEncoding {
            position_ids: (0..n as u32).collect(),
            segment_ids: (0..n).map(|i| u8::from(i >= word_span)).collect(),
            token_ids,
        })
    }

    /// Decoder input `[LANG] d…` and target `d… [EOS]` for a definition.
    pub fn build_target(
        &self,
        definition: &str,
        output_lang: &Lang,
    ) -> Result<(Vec<u32>, Vec<u32>), TokenizerError> {
        let prompt = self.prompt_id(output_lang)?;
        let body = self.encode(definition);
        let mut prefix = Vec::with_capacity(body.len() + 1);
        prefix.push(prompt);
        prefix.extend_from_slice(&body);
        let mut target = body;
        target.push(EOS_ID);
        Ok((prefix, target))
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FILE_MAGIC} v{FILE_VERSION}");
        let _ = writeln!(s, "specials {}", SPECIAL_NAMES.len());
        for name in SPECIAL_NAMES {
            let _ = writeln!(s, "{name}");
        }
        let langs: Vec<&Lang> = self.vocab.languages().collect();
        let _ = writeln!(s, "langs {}", langs.len());
        // Prompt ids follow insertion order, so list them by id.
        let mut by_id: Vec<(u32, &Lang)> = langs
            .iter()
            .map(|l| (self.vocab.prompt_id(l).unwrap(), *l))
            .collect();
        by_id.sort();
        for (_, lang) in by_id {
            let _ = writeln!(s, "{lang}");
        }
        let _ = writeln!(s, "alphabet {}", self.alphabet_len);
        let first = self.vocab.reserved_count();
        for id in first..first + self.alphabet_len {
            let sym = piece(&self.vocab, id as u32);
            let _ = writeln!(s, "{}\t{}", sym.text, u8::from(sym.end_of_word));
        }
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self, TokenizerError> {
        let bad = |m: &str| TokenizerError::Format(m.to_owned());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let version = header
            .strip_prefix(FILE_MAGIC)
            .and_then(|r| r.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad("missing header"))?;
        if version != FILE_VERSION {
            return Err(TokenizerError::VersionMismatch {
                found: version,
                expected: FILE_VERSION,
            });
        }
        let mut section = |name: &str| -> Result<(usize, Vec<&str>), TokenizerError> {
            let head = lines.next().ok_or_else(|| bad("truncated file"))?;
            let count = head
                .strip_prefix(name)
                .and_then(|r| r.trim().parse::<usize>().ok())
                .ok_or_else(|| bad(&format!("expected `{name} N`")))?;
            let body: Vec<&str> = (&mut lines).take(count).collect();
            if body.len() != count {
                return Err(bad("truncated section"));
            }
            Ok((count, body))
        };
        let (_, specials) = section("specials")?;
        if specials != SPECIAL_NAMES {
            return Err(bad("unexpected special tokens"));
        }
        let (_, langs) = section("langs")?;
        let langs: Vec<Lang> = langs
            .iter()
            .map(|l| Lang::new(*l).map_err(|e| bad(&e.to_string())))
            .collect::<Result<_, _>>()?;
        let mut vocab = Vocabulary::new(&langs);
        let (alphabet_len, alphabet) = section("alphabet")?;
        for line in alphabet {
            let (text, flag) = line.rsplit_once('\t').ok_or_else(|| bad("bad alphabet line"))?;
            if text.chars().count() != 1 {
                return Err(bad("alphabet symbols are single characters"));
            }
            vocab.push_piece(Symbol {
                text: text.to_owned(),
                end_of_word: flag == "1",
            });
        }
        let (_, merge_lines) = section("merges")?;
        let mut merges = Vec::with_capacity(merge_lines.len());
        for line in merge_lines {
            let (l, r) = line.split_once(' ').ok_or_else(|| bad("bad merge line"))?;
            let l: u32 = l.parse().map_err(|_| bad("bad merge id"))?;
            let r: u32 = r.parse().map_err(|_| bad("bad merge id"))?;
            for id in [l, r] {
                if !matches!(vocab.token(id), Some(Token::Piece(_))) {
                    return Err(bad("merge references an unknown piece"));
                }
            }
            let merged = piece(&vocab, l).concat(piece(&vocab, r));
            vocab.push_piece(merged);
            merges.push((l, r));
        }
        Ok(SubwordTokenizer::from_parts(vocab, alphabet_len, merges))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }
}
