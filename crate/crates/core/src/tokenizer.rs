//! WordPiece-style subword tokenizer with the retrieval special tokens.
//!
//! The vocabulary is trained by pair-frequency merging over a word-count
//! table and expressed in WordPiece convention: continuation pieces carry a
//! leading `##`. Encoding is greedy longest-match per word; a word with no
//! matching prefix becomes a single `[UNK]`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, TokenizerError};

/// The seven reserved tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[Q]", "[D]"];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const Q_ID: u32 = 5;
pub const D_ID: u32 = 6;

/// Lowercase and split into words on whitespace and punctuation. Every
/// punctuation character becomes its own word. This is the shared word
/// normalization: the sparse index uses the same function, so lexical and
/// subword views of a text agree on word boundaries.
pub fn normalize_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in lower.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Immutable token table. Ids are dense `0..len`; the specials always occupy
/// ids 0–6. Encode and decode are pure, so a shared reference is thread-safe.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Panics on an out-of-range id; use [`Vocabulary::decode`] for untrusted ids.
    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Build a vocabulary from raw text: specials, then every single-character
    /// piece, then pair merges by descending frequency (ties broken toward the
    /// lexicographically smaller pair) until `target_size` entries exist or no
    /// pair reaches `min_freq`.
    pub fn build(
        corpus: impl Iterator<Item = impl AsRef<str>>,
        target_size: usize,
        min_freq: u64,
    ) -> Result<Vocabulary, TokenizerError> {
        let mut word_counts: HashMap<String, u64> = HashMap::new();
        for line in corpus {
            for w in normalize_words(line.as_ref()) {
                *word_counts.entry(w).or_insert(0) += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }

        // Each distinct word starts as single-character pieces, continuations
        // prefixed. Kept sorted so merge order is independent of hash order.
        let mut words: Vec<(Vec<String>, u64)> = {
            let mut v: Vec<(String, u64)> = word_counts.into_iter().collect();
            v.sort();
            v.into_iter()
                .map(|(w, c)| {
                    let pieces = w
                        .chars()
                        .enumerate()
                        .map(|(i, ch)| {
                            if i == 0 {
                                ch.to_string()
                            } else {
                                format!("##{ch}")
                            }
                        })
                        .collect();
                    (pieces, c)
                })
                .collect()
        };

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        {
            let mut base: Vec<String> = words
                .iter()
                .flat_map(|(pieces, _)| pieces.iter().cloned())
                .collect();
            base.sort();
            base.dedup();
            tokens.extend(base);
        }
        if target_size < tokens.len() {
            return Err(TokenizerError::TargetSizeTooSmall {
                target: target_size,
                min: tokens.len(),
            });
        }

        while tokens.len() < target_size {
            let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
            for (pieces, count) in &words {
                for pair in pieces.windows(2) {
                    *pair_counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += count;
                }
            }
            let best = pair_counts.into_iter().fold(None, |acc, (pair, count)| match acc {
                None => Some((pair, count)),
                Some((bp, bc)) => {
                    if count > bc || (count == bc && pair < bp) {
                        Some((pair, count))
                    } else {
                        Some((bp, bc))
                    }
                }
            });
            let Some(((left, right), count)) = best else { break };
            if count < min_freq {
                break;
            }
            let merged = format!("{left}{}", right.trim_start_matches("##"));
            for (pieces, _) in &mut words {
                let mut i = 0;
                while i + 1 < pieces.len() {
                    if pieces[i] == left && pieces[i + 1] == right {
                        pieces[i] = merged.clone();
                        pieces.remove(i + 1);
                    } else {
                        i += 1;
                    }
                }
            }
            tokens.push(merged);
        }

        Ok(Vocabulary::from_tokens(tokens))
    }

    /// Subword ids for raw text. Total: unknown words map to `[UNK]` rather
    /// than failing, and raw text can never produce a special id because
    /// normalization splits the bracket characters apart.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in normalize_words(text) {
            self.encode_word(&word, &mut out);
        }
        out
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut piece_ids = Vec::new();
        let mut start = 0;
        while start < word.len() {
            let mut found = None;
            // Longest match first; candidate ends run over char boundaries.
            let ends: Vec<usize> = word[start..]
                .char_indices()
                .map(|(i, c)| start + i + c.len_utf8())
                .collect();
            for &end in ends.iter().rev() {
                let candidate = if start == 0 {
                    word[start..end].to_string()
                } else {
                    format!("##{}", &word[start..end])
                };
                if let Some(id) = self.index.get(&candidate) {
                    found = Some((*id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    piece_ids.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK_ID);
                    return;
                }
            }
        }
        out.extend(piece_ids);
    }

    /// Render ids back to text: tokens joined by spaces, `##` continuations
    /// fused onto the previous token. Special tokens render literally.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let token = self.tokens.get(id as usize).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.tokens.len(),
            })?;
            if let Some(cont) = token.strip_prefix("##") {
                write!(out, "{cont}").unwrap();
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                write!(out, "{token}").unwrap();
            }
        }
        Ok(out)
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut body = String::new();
        for t in &self.tokens {
            body.push_str(t);
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary, Error> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let bad = |reason: String| {
            Error::Tokenizer(TokenizerError::BadVocabFile {
                path: path.display().to_string(),
                reason,
            })
        };
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(bad(format!("only {} lines", tokens.len())));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(bad(format!("line {i} must be {want}, found {:?}", tokens[i])));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(bad(format!("empty token at line {i}")));
            }
            if !seen.insert(t.as_str()) {
                return Err(bad(format!("duplicate token {t:?} at line {i}")));
            }
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}
