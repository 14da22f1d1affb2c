//! Query workflow: validation, named-entity short-circuit, mode dispatch and
//! example sentences.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::decoding::{generate, GenerationSpec};
use crate::lang::{contains_cjk, is_cjk, Lang};
use crate::model::ModelParams;
use crate::tokenizer::SubwordTokenizer;
use crate::training::fit_input;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "en-en")]
    EnEn,
    #[serde(rename = "zh-zh")]
    ZhZh,
    #[serde(rename = "zh-en")]
    ZhEn,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::EnEn, Mode::ZhZh, Mode::ZhEn];

    pub fn id(self) -> &'static str {
        match self {
            Mode::EnEn => "en-en",
            Mode::ZhZh => "zh-zh",
            Mode::ZhEn => "zh-en",
        }
    }

    pub fn input_lang(self) -> Lang {
        match self {
            Mode::EnEn => Lang::en(),
            Mode::ZhZh | Mode::ZhEn => Lang::zh(),
        }
    }

    pub fn output_lang(self) -> Lang {
        match self {
            Mode::EnEn | Mode::ZhEn => Lang::en(),
            Mode::ZhZh => Lang::zh(),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected en-en, zh-zh or zh-en)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub word: String,
    pub context: String,
    pub mode: Mode,
}

impl QueryRequest {
    pub fn new(word: impl Into<String>, context: impl Into<String>, mode: Mode) -> Self {
        QueryRequest {
            word: word.into(),
            context: context.into(),
            mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouterError {
    #[error("{0} must not be empty")]
    EmptyField(&'static str),
    #[error("the word does not appear in the context")]
    WordNotInContext,
    #[error("no model loaded for mode {0}")]
    ModelUnavailable(Mode),
    #[error("generation failed: {0}")]
    Generation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Generated,
    Predefined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionResult {
    pub definition: String,
    pub source: Source,
    pub mode: Mode,
    pub examples: Vec<String>,
    /// Checkpoint identifier; `None` for predefined definitions.
    pub model_id: Option<String>,
    /// Named-entity category for predefined definitions.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub category: Option<String>,
}

/// Letters and digits outside CJK, which never border a word boundary.
fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() && !is_cjk(c)
}

/// Case-folded containment: plain substring when the word has CJK
/// characters, whole-word match otherwise.
pub fn word_in_context(word: &str, context: &str) -> bool {
    let word = word.trim().to_lowercase();
    let context = context.to_lowercase();
    if word.is_empty() {
        return false;
    }
    if contains_cjk(&word) {
        return context.contains(&word);
    }
    let first = word.chars().next().is_some_and(is_word_char);
    let last = word.chars().next_back().is_some_and(is_word_char);
    context.match_indices(&word).any(|(start, m)| {
        let before = context[..start].chars().next_back();
        let after = context[start + m.len()..].chars().next();
        !(first && before.is_some_and(is_word_char)) && !(last && after.is_some_and(is_word_char))
    })
}

pub fn validate(request: &QueryRequest) -> Result<(), RouterError> {
    if request.word.trim().is_empty() {
        return Err(RouterError::EmptyField("word"));
    }
    if request.context.trim().is_empty() {
        return Err(RouterError::EmptyField("context"));
    }
    if !word_in_context(&request.word, &request.context) {
        return Err(RouterError::WordNotInContext);
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum GazetteerError {
    #[error("line {line}: expected surface, category and definition separated by tabs")]
    Malformed { line: usize },
    #[error("line {line}: category {category:?} already has a different definition")]
    ConflictingDefinition { line: usize, category: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Surface form → category → predefined definition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Gazetteer {
    surfaces: HashMap<String, String>,
    definitions: BTreeMap<String, String>,
}

impl Gazetteer {
    /// Tab-separated `surface, category, definition`; blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_tsv(text: &str) -> Result<Self, GazetteerError> {
        let mut g = Gazetteer::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [surface, category, definition] = fields[..] else {
                return Err(GazetteerError::Malformed { line: i + 1 });
            };
            let (surface, category, definition) = (surface.trim(), category.trim(), definition.trim());
            if surface.is_empty() || category.is_empty() || definition.is_empty() {
                return Err(GazetteerError::Malformed { line: i + 1 });
            }
            g.insert(surface, category, definition)
                .map_err(|category| GazetteerError::ConflictingDefinition { line: i + 1, category })?;
        }
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GazetteerError> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    /// Adds an entry; fails with the category name if it already maps to a
    /// different definition.
    pub fn insert(&mut self, surface: &str, category: &str, definition: &str) -> Result<(), String> {
        match self.definitions.get(category) {
            Some(existing) if existing != definition => return Err(category.to_string()),
            Some(_) => {}
            None => {
                self.definitions.insert(category.to_string(), definition.to_string());
            }
        }
        self.surfaces.insert(surface.to_string(), category.to_string());
        Ok(())
    }

    pub fn category(&self, surface: &str) -> Option<&str> {
        self.surfaces.get(surface).map(String::as_str)
    }

    pub fn definition(&self, category: &str) -> Option<&str> {
        self.definitions.get(category).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityMatch {
    pub category: String,
    pub definition: String,
}

/// Named-entity detection used by [`Router::define`].
pub trait EntityDetector: Send + Sync {
    fn detect(&self, request: &QueryRequest) -> Option<EntityMatch>;
}

impl EntityDetector for Gazetteer {
    fn detect(&self, request: &QueryRequest) -> Option<EntityMatch> {
        let category = self.category(request.word.trim())?;
        Some(EntityMatch {
            category: category.to_string(),
            definition: self.definition(category)?.to_string(),
        })
    }
}

/// Exact, case-sensitive surface lookup.
pub fn detect_named_entity<'g>(request: &QueryRequest, gazetteer: &'g Gazetteer) -> Option<&'g str> {
    gazetteer.category(request.word.trim())
}

/// Produces a definition for a validated query.
pub trait DefinitionGenerator: Send + Sync {
    fn generate(&self, word: &str, context: &str) -> Result<String, RouterError>;
    fn model_id(&self) -> String;
}

/// A checkpoint plus the language prompts of one mode.
pub struct ModelGenerator {
    params: ModelParams,
    tokenizer: Arc<SubwordTokenizer>,
    input_lang: Lang,
    spec: GenerationSpec,
    id: String,
}

impl ModelGenerator {
    /// `spec.output_lang` is replaced by the mode's output language.
    pub fn new(
        params: ModelParams,
        tokenizer: Arc<SubwordTokenizer>,
        mode: Mode,
        spec: GenerationSpec,
        id: impl Into<String>,
    ) -> Self {
        ModelGenerator {
            params,
            tokenizer,
            input_lang: mode.input_lang(),
            spec: GenerationSpec {
                output_lang: mode.output_lang(),
                ..spec
            },
            id: id.into(),
        }
    }
}

impl DefinitionGenerator for ModelGenerator {
    fn generate(&self, word: &str, context: &str) -> Result<String, RouterError> {
        let input = self
            .tokenizer
            .build_input_sequence(word, context, &self.input_lang)
            .map_err(|e| RouterError::Generation(e.to_string()))?;
        let input = fit_input(input, self.params.config().max_positions);
        generate(&self.params, &input, &self.spec, &self.tokenizer).map_err(|e| RouterError::Generation(e.to_string()))
    }

    fn model_id(&self) -> String {
        self.id.clone()
    }
}

/// Example sentences in corpus order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusIndex {
    sentences: Vec<String>,
}

impl CorpusIndex {
    /// Keeps the first occurrence of each distinct sentence.
    pub fn new<I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = std::collections::HashSet::new();
        let sentences = sentences
            .into_iter()
            .map(Into::into)
            .filter(|s: &String| !s.trim().is_empty() && seen.insert(s.clone()))
            .collect();
        CorpusIndex { sentences }
    }

    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self::new(dataset.entries().iter().map(|e| e.context.clone()))
    }

    /// One sentence per line.
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self::new(std::fs::read_to_string(path)?.lines().map(str::to_string)))
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Up to `k` indexed sentences containing `word`, in corpus order.
    pub fn fetch_examples(&self, word: &str, k: usize) -> Vec<String> {
        self.sentences
            .iter()
            .filter(|s| word_in_context(word, s))
            .take(k)
            .cloned()
            .collect()
    }
}

pub fn fetch_examples(word: &str, index: &CorpusIndex, k: usize) -> Vec<String> {
    index.fetch_examples(word, k)
}

pub const DEFAULT_EXAMPLES: usize = 3;

/// Immutable after construction; `define` may be called concurrently.
pub struct Router {
    detector: Arc<dyn EntityDetector>,
    models: BTreeMap<Mode, Arc<dyn DefinitionGenerator>>,
    index: CorpusIndex,
    examples_k: usize,
}

impl Router {
    pub fn new(detector: Arc<dyn EntityDetector>, index: CorpusIndex) -> Self {
        Router {
            detector,
            models: BTreeMap::new(),
            index,
            examples_k: DEFAULT_EXAMPLES,
        }
    }

    pub fn with_model(mut self, mode: Mode, generator: Arc<dyn DefinitionGenerator>) -> Self {
        self.models.insert(mode, generator);
        self
    }

    pub fn with_examples(mut self, k: usize) -> Self {
        self.examples_k = k;
        self
    }

    pub fn has_model(&self, mode: Mode) -> bool {
        self.models.contains_key(&mode)
    }

    pub fn modes(&self) -> impl Iterator<Item = Mode> + '_ {
        self.models.keys().copied()
    }

    pub fn index(&self) -> &CorpusIndex {
        &self.index
    }

    pub fn examples(&self, word: &str, k: usize) -> Vec<String> {
        self.index.fetch_examples(word, k)
    }

    /// Validate, then answer from the entity detector if it matches, else
    /// generate with the mode's model. Examples are attached either way.
    pub fn define(&self, request: &QueryRequest) -> Result<DefinitionResult, RouterError> {
        validate(request)?;
        let word = request.word.trim();
        let examples = self.index.fetch_examples(word, self.examples_k);
        if let Some(hit) = self.detector.detect(request) {
            return Ok(DefinitionResult {
                definition: hit.definition,
                source: Source::Predefined,
                mode: request.mode,
                examples,
                model_id: None,
                category: Some(hit.category),
            });
        }
        let generator = self
            .models
            .get(&request.mode)
            .ok_or(RouterError::ModelUnavailable(request.mode))?;
        let definition = generator.generate(word, &request.context)?;
        if definition.trim().is_empty() {
            return Err(RouterError::Generation("model produced an empty definition".into()));
        }
        Ok(DefinitionResult {
            definition,
            source: Source::Generated,
            mode: request.mode,
            examples,
            model_id: Some(generator.model_id()),
            category: None,
        })
    }
}
