//! Whitespace word-level tokenizer over a closed vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const NEWLINE: &str = "\n";
/// Tokens that end a sentence.
pub const DEFAULT_DELIMITERS: [&str; 4] = [".", "!", "?", NEWLINE];

/// Reserved entries, always at ids 0..6 in this order.
const SPECIALS: [&str; 6] = [UNK, EOS, ".", "!", "?", NEWLINE];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from the given words plus the reserved specials.
    /// Word order is normalized (sorted, deduplicated) so the mapping only
    /// depends on the word set.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut extra: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()) && !w.is_empty())
            .collect();
        extra.sort();
        extra.dedup();
        let all: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(extra)
            .collect();
        Self::from(all)
    }

    /// Vocabulary covering every token of every text.
    pub fn from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words = Vec::new();
        for t in texts {
            words.extend(split_tokens(t).into_iter().map(str::to_string));
        }
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.ids.get(word).copied().unwrap_or(0)
    }

    pub fn get(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.words.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn unk_id(&self) -> TokenId {
        0
    }

    pub fn eos_id(&self) -> TokenId {
        1
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split_tokens(text).into_iter().map(|w| self.id(w)).collect()
    }

    /// Space-joined rendering; newline tokens render as line breaks.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id);
            if w == NEWLINE {
                out.push('\n');
                continue;
            }
            if !out.is_empty() && !out.ends_with('\n') {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }

    pub fn delimiter_ids(&self) -> Vec<TokenId> {
        DEFAULT_DELIMITERS.iter().map(|d| self.id(d)).collect()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Self { words, ids }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

/// Splits on spaces and tabs, keeps newlines as tokens, and detaches
/// trailing sentence punctuation from words.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for (li, line) in text.split('\n').enumerate() {
        if li > 0 {
            out.push(NEWLINE);
        }
        for word in line.split([' ', '\t', '\r']).filter(|w| !w.is_empty()) {
            let trimmed = word.trim_end_matches(['.', '!', '?']);
            if !trimmed.is_empty() {
                out.push(trimmed);
            }
            // each trailing punctuation char is its own token
            for (i, _) in word[trimmed.len()..].char_indices() {
                let start = trimmed.len() + i;
                out.push(&word[start..start + 1]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_newlines() {
        assert_eq!(
            split_tokens("the cat sat.\nwhy?!  ok"),
            vec!["the", "cat", "sat", ".", "\n", "why", "?", "!", "ok"]
        );
        assert!(split_tokens("").is_empty());
        assert_eq!(split_tokens("..."), vec![".", ".", "."]);
    }

    #[test]
    fn specials_fixed_and_unknown_maps_to_unk() {
        let v = Vocab::from_words(["zeta", "alpha", "alpha"]);
        assert_eq!(v.word(0), UNK);
        assert_eq!(v.eos_id(), 1);
        assert_eq!(v.id("."), 2);
        assert_eq!(v.id("alpha"), 6);
        assert_eq!(v.id("missing"), v.unk_id());
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::from_texts(["a b c.", "d"]);
        let ids = v.encode("a b . d");
        assert_eq!(v.decode(&ids), "a b . d");
        let nl = v.encode("a\nb");
        assert_eq!(v.decode(&nl), "a\nb");
    }

    #[test]
    fn serde_roundtrip() {
        let v = Vocab::from_words(["x", "y"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }
}
