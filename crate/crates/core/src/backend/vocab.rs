use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{Backend, TokenId};
use crate::error::{Error, Result};

/// Bundled English stop-word list.
pub const STOPWORDS_EN: &str = include_str!("../../data/stopwords_en.txt");

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_EN
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

pub(crate) fn is_stopword(word: &str) -> bool {
    stopwords().contains(word)
}

/// Rules selecting the token ids eligible as stimuli.
///
/// Special tokens (BOS, EOS, padding, control) are always excluded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularyFilter {
    pub exclude_stopwords: bool,
    pub exclude_punctuation: bool,
    pub exclude_numerals: bool,
    /// Drop tokens whose rendering does not re-tokenize to a single token.
    pub exclude_multi_token: bool,
    /// One token string per line; the filtered set is intersected with it.
    pub allowlist_path: Option<PathBuf>,
}

impl Default for VocabularyFilter {
    fn default() -> Self {
        Self {
            exclude_stopwords: true,
            exclude_punctuation: true,
            exclude_numerals: true,
            exclude_multi_token: true,
            allowlist_path: None,
        }
    }
}

impl VocabularyFilter {
    /// Only special tokens are removed.
    pub fn permissive() -> Self {
        Self {
            exclude_stopwords: false,
            exclude_punctuation: false,
            exclude_numerals: false,
            exclude_multi_token: false,
            allowlist_path: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextClass {
    Empty,
    Punctuation,
    Numeral,
    Stopword,
    Word,
}

/// Strips surrounding whitespace and the word-boundary markers used by
/// SentencePiece (`▁`) and byte-level BPE (`Ġ`, `Ċ`).
pub fn normalize_token_text(text: &str) -> &str {
    text.trim_matches(|c: char| c.is_whitespace() || matches!(c, '\u{2581}' | '\u{0120}' | '\u{010A}'))
}

pub fn classify_text(text: &str) -> TextClass {
    let t = normalize_token_text(text);
    if t.is_empty() {
        return TextClass::Empty;
    }
    if !t.chars().any(char::is_alphanumeric) {
        return TextClass::Punctuation;
    }
    if !t.chars().any(char::is_alphabetic) {
        return TextClass::Numeral;
    }
    if is_stopword(&t.to_lowercase()) {
        return TextClass::Stopword;
    }
    TextClass::Word
}

pub fn load_allowlist(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| normalize_token_text(l).to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Token ids passing `filter`, in ascending order.
pub fn filtered_vocabulary<B: Backend + ?Sized>(
    backend: &B,
    filter: &VocabularyFilter,
) -> Result<BTreeSet<TokenId>> {
    let allow = filter
        .allowlist_path
        .as_deref()
        .map(load_allowlist)
        .transpose()?;
    let special = backend.special_ids();
    let mut out = BTreeSet::new();
    for id in 0..backend.descriptor().vocab_size as TokenId {
        if special.contains(&id) || backend.bos_id() == Some(id) {
            continue;
        }
        let text = backend.token_text(id)?;
        let keep = match classify_text(&text) {
            TextClass::Empty => false,
            TextClass::Punctuation => !filter.exclude_punctuation,
            TextClass::Numeral => !filter.exclude_numerals,
            TextClass::Stopword => !filter.exclude_stopwords,
            TextClass::Word => true,
        };
        if !keep {
            continue;
        }
        if let Some(allow) = &allow {
            if !allow.contains(normalize_token_text(&text)) {
                continue;
            }
        }
        if filter.exclude_multi_token && !backend.is_single_token(id) {
            continue;
        }
        out.insert(id);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification() {
        assert_eq!(classify_text("."), TextClass::Punctuation);
        assert_eq!(classify_text(" ,\""), TextClass::Punctuation);
        assert_eq!(classify_text("123"), TextClass::Numeral);
        assert_eq!(classify_text("\u{2581}1,000"), TextClass::Numeral);
        assert_eq!(classify_text("house"), TextClass::Word);
        assert_eq!(classify_text("\u{0120}house"), TextClass::Word);
        assert_eq!(classify_text(" The"), TextClass::Stopword);
        assert_eq!(classify_text("   "), TextClass::Empty);
    }

    #[test]
    fn stopword_list_is_loaded() {
        assert!(is_stopword("the"));
        assert!(is_stopword("and"));
        assert!(!is_stopword("house"));
        assert!(!is_stopword("#"));
    }
}
