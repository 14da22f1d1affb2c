//! Definition datasets in the canonical record format.
//!
//! A dataset file is UTF-8 JSON-Lines, one object per entry with the fields
//! `word`, `context`, `definition`, `source_lang` and `target_lang`. Extra
//! fields are ignored. Entries whose headword does not occur in the context
//! are kept but flagged; [`LoadOptions::for_training`] drops them.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lang::{count_tokens, Lang};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("dataset file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error reading dataset: {0}")]
    Io(#[from] io::Error),
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("cannot split an empty dataset")]
    EmptyDataset,
    #[error("degenerate split ratios {0:?}: every ratio must be positive")]
    DegenerateRatios([f64; 3]),
    #[error("split ratios {0:?} do not sum to 1")]
    RatiosDoNotSumToOne([f64; 3]),
    #[error("unknown dataset format {0:?}")]
    UnknownFormat(String),
}

/// Supported on-disk dataset encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    JsonLines,
}

impl FromStr for DatasetFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" | "json-lines" | "jsonlines" => Ok(DatasetFormat::JsonLines),
            other => Err(CorpusError::UnknownFormat(other.to_owned())),
        }
    }
}

/// One `(word, context, definition)` record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DictEntry {
    pub word: String,
    pub context: String,
    pub definition: String,
    pub source_lang: Lang,
    pub target_lang: Lang,
    #[serde(skip)]
    containment_ok: bool,
}

impl DictEntry {
    pub fn new(
        word: impl Into<String>,
        context: impl Into<String>,
        definition: impl Into<String>,
        source_lang: Lang,
        target_lang: Lang,
    ) -> Self {
        let word = word.into();
        let context = context.into();
        let containment_ok = context.to_lowercase().contains(&word.to_lowercase());
        DictEntry {
            word,
            context,
            definition: definition.into(),
            source_lang,
            target_lang,
            containment_ok,
        }
    }

    /// True iff the case-folded word is a substring of the case-folded context.
    pub fn containment_ok(&self) -> bool {
        self.containment_ok
    }
}

#[derive(Deserialize)]
struct RawRecord {
    word: Option<String>,
    context: Option<String>,
    definition: Option<String>,
    source_lang: Option<String>,
    target_lang: Option<String>,
}

impl RawRecord {
    fn into_entry(self, line: usize) -> Result<DictEntry, CorpusError> {
        let malformed = |reason: String| CorpusError::MalformedRecord { line, reason };
        let missing = |field: &str| malformed(format!("missing field `{field}`"));
        let word = self.word.ok_or_else(|| missing("word"))?;
        let context = self.context.ok_or_else(|| missing("context"))?;
        let definition = self.definition.ok_or_else(|| missing("definition"))?;
        let source_lang = self.source_lang.ok_or_else(|| missing("source_lang"))?;
        let target_lang = self.target_lang.ok_or_else(|| missing("target_lang"))?;
        if word.trim().is_empty() {
            return Err(malformed("empty `word`".into()));
        }
        if definition.trim().is_empty() {
            return Err(malformed("empty `definition`".into()));
        }
        let source_lang = Lang::new(source_lang).map_err(|e| malformed(e.to_string()))?;
        let target_lang = Lang::new(target_lang).map_err(|e| malformed(e.to_string()))?;
        Ok(DictEntry::new(
            word.trim(),
            context,
            definition,
            source_lang,
            target_lang,
        ))
    }
}

/// An ordered collection of entries plus the set of distinct headwords.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    entries: Vec<DictEntry>,
    lexicon: BTreeSet<String>,
}

impl Dataset {
    pub fn new(entries: Vec<DictEntry>) -> Self {
        let lexicon = entries.iter().map(|e| e.word.clone()).collect();
        Dataset { entries, lexicon }
    }

    pub fn entries(&self) -> &[DictEntry] {
        &self.entries
    }

    pub fn lexicon(&self) -> &BTreeSet<String> {
        &self.lexicon
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries whose word does not occur in their context.
    pub fn flagged_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.containment_ok).count()
    }

    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut entries = self.entries.clone();
        entries.extend(other.entries.iter().cloned());
        Dataset::new(entries)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }
}

impl FromIterator<DictEntry> for Dataset {
    fn from_iter<T: IntoIterator<Item = DictEntry>>(iter: T) -> Self {
        Dataset::new(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Drop entries whose word is not found in their context.
    pub exclude_uncontained: bool,
}

impl LoadOptions {
    pub fn for_training() -> Self {
        LoadOptions {
            exclude_uncontained: true,
        }
    }
}

/// Loads every record, flagged entries included.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset, CorpusError> {
    load_dataset_with(path, format, LoadOptions::default())
}

pub fn load_dataset_with(
    path: impl AsRef<Path>,
    format: DatasetFormat,
    options: LoadOptions,
) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CorpusError::FileNotFound(path.to_owned()),
        _ => CorpusError::Io(e),
    })?;
    let dataset = match format {
        DatasetFormat::JsonLines => read_jsonl(BufReader::new(file))?,
    };
    if options.exclude_uncontained {
        Ok(dataset
            .entries
            .into_iter()
            .filter(DictEntry::containment_ok)
            .collect())
    } else {
        Ok(dataset)
    }
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset, CorpusError> {
    let mut entries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        entries.push(raw.into_entry(line_no)?);
    }
    Ok(Dataset::new(entries))
}

/// Partitions headwords into train/valid/test so that every entry of a word
/// lands in exactly one split. The valid and test word counts are the
/// rounded ratio shares; train takes the remainder. Entries keep their input
/// order inside each split.
pub fn split_by_word(
    dataset: &Dataset,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), CorpusError> {
    if ratios.iter().any(|r| r.is_nan() || *r <= 0.0) {
        return Err(CorpusError::DegenerateRatios(ratios));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::RatiosDoNotSumToOne(ratios));
    }
    if dataset.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }

    let mut words: Vec<&str> = dataset.lexicon.iter().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    words.shuffle(&mut rng);

    let total = words.len();
    let n_valid = (ratios[1] * total as f64).round() as usize;
    let n_test = ((ratios[2] * total as f64).round() as usize).min(total - n_valid);
    let n_train = total - n_valid - n_test;

    let mut assignment = std::collections::HashMap::with_capacity(total);
    for (i, w) in words.into_iter().enumerate() {
        let split = if i < n_train {
            0u8
        } else if i < n_train + n_valid {
            1
        } else {
            2
        };
        assignment.insert(w, split);
    }

    let mut parts: [Vec<DictEntry>; 3] = Default::default();
    for entry in &dataset.entries {
        parts[assignment[entry.word.as_str()] as usize].push(entry.clone());
    }
    let [train, valid, test] = parts;
    Ok((Dataset::new(train), Dataset::new(valid), Dataset::new(test)))
}

/// Word/entry counts and mean context/definition lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub word_count: usize,
    pub entry_count: usize,
    pub avg_context_len: f64,
    pub avg_definition_len: f64,
}

/// Context length uses the entry's source language counting rule, definition
/// length the target language rule (see [`count_tokens`]).
pub fn compute_statistics(dataset: &Dataset) -> DatasetStats {
    let n = dataset.len();
    if n == 0 {
        return DatasetStats {
            word_count: 0,
            entry_count: 0,
            avg_context_len: 0.0,
            avg_definition_len: 0.0,
        };
    }
    let (ctx, def) = dataset.entries.iter().fold((0usize, 0usize), |(c, d), e| {
        (
            c + count_tokens(&e.context, &e.source_lang),
            d + count_tokens(&e.definition, &e.target_lang),
        )
    });
    DatasetStats {
        word_count: dataset.lexicon.len(),
        entry_count: n,
        avg_context_len: ctx as f64 / n as f64,
        avg_definition_len: def as f64 / n as f64,
    }
}

/// Parses `8:1:1` style ratio strings into normalized fractions.
pub fn parse_ratios(spec: &str) -> Result<[f64; 3], CorpusError> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CorpusError::DegenerateRatios([0.0; 3]))?;
    let [a, b, c]: [f64; 3] = parts
        .try_into()
        .map_err(|_| CorpusError::DegenerateRatios([0.0; 3]))?;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(CorpusError::DegenerateRatios([a, b, c]));
    }
    let sum = a + b + c;
    Ok([a / sum, b / sum, c / sum])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(word: &str, context: &str, definition: &str) -> DictEntry {
        DictEntry::new(word, context, definition, Lang::en(), Lang::en())
    }

    #[test]
    fn containment_flag() {
        assert!(entry("Cat", "the cat sat", "a pet").containment_ok());
        assert!(!entry("dog", "the cat sat", "a pet").containment_ok());
    }

    #[test]
    fn two_records() {
        let text = concat!(
            r#"{"word":"cat","context":"the cat sat","definition":"a small pet","source_lang":"en","target_lang":"en"}"#,
            "\n",
            r#"{"word":"dog","context":"a dog barked","definition":"a loyal pet","source_lang":"en","target_lang":"en","extra":1}"#,
            "\n"
        );
        let ds = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.lexicon().len(), 2);
        assert_eq!(ds.flagged_count(), 0);
    }

    #[test]
    fn empty_input() {
        let ds = read_jsonl(&b""[..]).unwrap();
        assert_eq!(ds.len(), 0);
        assert!(ds.lexicon().is_empty());
    }

    #[test]
    fn missing_field_reports_line() {
        let text = concat!(
            r#"{"word":"cat","context":"the cat sat","definition":"a pet","source_lang":"en","target_lang":"en"}"#,
            "\n",
            r#"{"word":"dog","definition":"a pet","source_lang":"en","target_lang":"en"}"#,
        );
        match read_jsonl(text.as_bytes()) {
            Err(CorpusError::MalformedRecord { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("context"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file() {
        let err = load_dataset("/nonexistent/data.jsonl", DatasetFormat::JsonLines).unwrap_err();
        assert!(matches!(err, CorpusError::FileNotFound(_)));
    }

    #[test]
    fn training_loader_drops_uncontained() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        Dataset::new(vec![
            entry("cat", "the cat sat", "a pet"),
            entry("ran", "he runs fast", "moved quickly"),
        ])
        .save(&path)
        .unwrap();
        let all = load_dataset(&path, DatasetFormat::JsonLines).unwrap();
        assert_eq!(all.flagged_count(), 1);
        let train = load_dataset_with(&path, DatasetFormat::JsonLines, LoadOptions::for_training())
            .unwrap();
        assert_eq!(train.len(), 1);
    }

    #[test]
    fn ten_words_split_eight_one_one() {
        let ds: Dataset = (0..10)
            .map(|i| entry(&format!("w{i}"), &format!("x w{i} y"), "d"))
            .collect();
        for seed in 0..5 {
            let (a, b, c) = split_by_word(&ds, [0.8, 0.1, 0.1], seed).unwrap();
            assert_eq!((a.lexicon().len(), b.lexicon().len(), c.lexicon().len()), (8, 1, 1));
        }
    }

    #[test]
    fn split_errors() {
        let ds: Dataset = vec![entry("a", "a", "d")].into_iter().collect();
        assert!(matches!(
            split_by_word(&ds, [0.9, 0.1, 0.0], 0),
            Err(CorpusError::DegenerateRatios(_))
        ));
        assert!(matches!(
            split_by_word(&ds, [0.5, 0.1, 0.1], 0),
            Err(CorpusError::RatiosDoNotSumToOne(_))
        ));
        assert!(matches!(
            split_by_word(&Dataset::default(), [0.8, 0.1, 0.1], 0),
            Err(CorpusError::EmptyDataset)
        ));
    }

    #[test]
    fn stats_single_entry() {
        let ds: Dataset = vec![entry("cat", "one two cat four five", "x y z")]
            .into_iter()
            .collect();
        let s = compute_statistics(&ds);
        assert_eq!(s.avg_context_len, 5.0);
        assert_eq!(s.avg_definition_len, 3.0);
        assert_eq!((s.word_count, s.entry_count), (1, 1));
        let empty = compute_statistics(&Dataset::default());
        assert_eq!(empty.avg_context_len, 0.0);
    }

    #[test]
    fn ratio_parsing() {
        let r = parse_ratios("8:1:1").unwrap();
        assert!((r[0] - 0.8).abs() < 1e-12 && (r[2] - 0.1).abs() < 1e-12);
        assert!(parse_ratios("8:1").is_err());
        assert!(parse_ratios("8:0:2").is_err());
    }
}
