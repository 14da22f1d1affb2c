//! Language codes and script-dependent text segmentation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A short language code such as `en` or `zh`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Lang(String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid language code {0:?}")]
pub struct InvalidLang(pub String);

impl Lang {
    pub fn new(code: impl Into<String>) -> Result<Self, InvalidLang> {
        let code = code.into();
        let ok = !code.is_empty()
            && code.len() <= 16
            && code
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if ok {
            Ok(Lang(code))
        } else {
            Err(InvalidLang(code))
        }
    }

    pub fn en() -> Self {
        Lang("en".to_owned())
    }

    pub fn zh() -> Self {
        Lang("zh".to_owned())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Languages written without spaces between words.
    pub fn is_unspaced(&self) -> bool {
        matches!(self.0.as_str(), "zh" | "ja" | "zh_CN" | "zh-CN")
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Lang {
    type Err = InvalidLang;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Lang::new(s)
    }
}

impl TryFrom<String> for Lang {
    type Error = InvalidLang;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Lang::new(value)
    }
}

impl From<Lang> for String {
    fn from(value: Lang) -> Self {
        value.0
    }
}

/// CJK ideographs, CJK punctuation and full-width forms.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0xFF00..=0xFFEF
        | 0x20000..=0x2A6DF)
}

pub fn contains_cjk(text: &str) -> bool {
    text.chars().any(is_cjk)
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32, 0x3000..=0x303F | 0xFF01..=0xFF0F | 0xFF1A..=0xFF20 | 0xFF3B..=0xFF40 | 0xFF5B..=0xFF65)
        || matches!(c, '“' | '”' | '‘' | '’' | '…' | '—' | '–' | '·')
}

/// Length of `text` in tokens for dataset statistics: whitespace tokens for
/// spaced languages, non-space non-punctuation characters for unspaced ones.
pub fn count_tokens(text: &str, lang: &Lang) -> usize {
    if lang.is_unspaced() {
        text.chars()
            .filter(|c| !c.is_whitespace() && !is_punct(*c))
            .count()
    } else {
        text.split_whitespace().count()
    }
}

/// Evaluation tokens: whitespace tokens for spaced languages, every
/// non-space character for unspaced ones.
pub fn segment<'a>(text: &'a str, lang: &Lang) -> Vec<&'a str> {
    if lang.is_unspaced() {
        text.char_indices()
            .filter(|(_, c)| !c.is_whitespace())
            .map(|(i, c)| &text[i..i + c.len_utf8()])
            .collect()
    } else {
        text.split_whitespace().collect()
    }
}
