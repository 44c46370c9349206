//! Word and subword tokenization over a fixed vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

/// Marks a word-initial subword piece, sentencepiece style.
pub const WORD_START: char = '\u{2581}'; // ▁

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("cannot tokenize word `{0}` with this vocabulary")]
    UnknownWord(String),
    #[error("empty word cannot be tokenized")]
    EmptyWord,
    #[error("token id {0} out of range")]
    BadTokenId(TokenId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    /// One token per whitespace-separated word.
    Word,
    /// Greedy longest-match over subword pieces; word-initial pieces carry
    /// the `▁` marker.
    Subword,
}

/// Token id ↔ surface string table with encode/decode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    kind: TokenizerKind,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Word-level tokenizer over the given vocabulary. The vocabulary is
    /// sorted and deduplicated so construction is deterministic.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = words.into_iter().map(Into::into).collect();
        tokens.sort();
        tokens.dedup();
        let mut t = Tokenizer { kind: TokenizerKind::Word, tokens, index: HashMap::new() };
        t.rebuild_index();
        t
    }

    /// Subword tokenizer. Pieces are written without the marker; every piece
    /// is usable word-internally, and word-initially with the `▁` marker.
    pub fn subword<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut bare: Vec<String> = pieces.into_iter().map(Into::into).collect();
        bare.sort();
        bare.dedup();
        let mut tokens = Vec::with_capacity(bare.len() * 2);
        for p in &bare {
            tokens.push(format!("{WORD_START}{p}"));
        }
        tokens.extend(bare);
        tokens.sort();
        let mut t = Tokenizer { kind: TokenizerKind::Subword, tokens, index: HashMap::new() };
        t.rebuild_index();
        t
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    /// Encode one word into one or more token ids.
    pub fn encode_word(&self, word: &str) -> Result<Vec<TokenId>, TokenizeError> {
        if word.is_empty() {
            return Err(TokenizeError::EmptyWord);
        }
        match self.kind {
            TokenizerKind::Word => self
                .id_of(word)
                .map(|id| vec![id])
                .ok_or_else(|| TokenizeError::UnknownWord(word.to_string())),
            TokenizerKind::Subword => {
                let mut ids = Vec::new();
                let mut rest = word;
                let mut at_start = true;
                while !rest.is_empty() {
                    let mut matched = None;
                    // greedy longest match, char-aligned
                    let ends: Vec<usize> =
                        rest.char_indices().map(|(i, _)| i).skip(1).chain([rest.len()]).collect();
                    for &end in ends.iter().rev() {
                        let piece = &rest[..end];
                        let key = if at_start {
                            format!("{WORD_START}{piece}")
                        } else {
                            piece.to_string()
                        };
                        if let Some(id) = self.id_of(&key) {
                            matched = Some((id, end));
                            break;
                        }
                    }
                    match matched {
                        Some((id, end)) => {
                            ids.push(id);
                            rest = &rest[end..];
                            at_start = false;
                        }
                        None => return Err(TokenizeError::UnknownWord(word.to_string())),
                    }
                }
                Ok(ids)
            }
        }
    }

    /// Encode whitespace-separated text.
    pub fn encode_text(&self, text: &str) -> Result<Vec<TokenId>, TokenizeError> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            out.extend(self.encode_word(word)?);
        }
        Ok(out)
    }

    /// Decode token ids back to a whitespace-joined string.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizeError> {
        let mut out = String::new();
        for &id in ids {
            let surface = self.token(id).ok_or(TokenizeError::BadTokenId(id))?;
            match self.kind {
                TokenizerKind::Word => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(surface);
                }
                TokenizerKind::Subword => {
                    if let Some(stripped) = surface.strip_prefix(WORD_START) {
                        if !out.is_empty() {
                            out.push(' ');
                        }
                        out.push_str(stripped);
                    } else {
                        out.push_str(surface);
                    }
                }
            }
        }
        Ok(out)
    }

    /// SHA-256 over the sorted `id\ttoken\n` lines; used by the remote LM
    /// protocol to check both sides agree on the vocabulary.
    pub fn digest(&self) -> String {
        let mut lines: Vec<String> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{i}\t{t}\n"))
            .collect();
        lines.sort();
        let mut hasher = Sha256::new();
        for line in lines {
            hasher.update(line.as_bytes());
        }
        hex_string(&hasher.finalize())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tokenizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut t: Tokenizer = serde_json::from_str(text)?;
        t.rebuild_index();
        Ok(t)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_round_trip() {
        let t = Tokenizer::from_words(["yes", "i", "found", "one", "event"]);
        let ids = t.encode_text("i found one event").unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(t.decode(&ids).unwrap(), "i found one event");
        assert!(t.encode_word("missing").is_err());
        assert!(t.encode_word("").is_err());
    }

    #[test]
    fn subword_splits_and_rejoins() {
        let t = Tokenizer::subword(["tom", "orrow", "to", "day"]);
        let ids = t.encode_word("tomorrow").unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(t.decode(&ids).unwrap(), "tomorrow");
        let ids = t.encode_text("today tomorrow").unwrap();
        assert_eq!(t.decode(&ids).unwrap(), "today tomorrow");
    }

    #[test]
    fn digest_is_stable_and_vocab_sensitive() {
        let a = Tokenizer::from_words(["a", "b"]);
        let b = Tokenizer::from_words(["a", "b"]);
        let c = Tokenizer::from_words(["a", "c"]);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn json_round_trip() {
        let t = Tokenizer::subword(["ab", "a", "b"]);
        let back = Tokenizer::from_json(&t.to_json()).unwrap();
        assert_eq!(back.encode_word("abab").unwrap(), t.encode_word("abab").unwrap());
    }
}
