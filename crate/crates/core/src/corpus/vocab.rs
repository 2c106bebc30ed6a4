use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 5] = ["<pad>", "<s>", "</s>", "<mask>", "<unk>"];

/// Longest sentence (content tokens, excluding `<s>` and `</s>`).
pub const DEFAULT_MAX_LEN: usize = 64;

/// Token vocabulary with fixed reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub fn is_reserved(id: usize) -> bool {
    id < RESERVED.len()
}

/// Lowercased whitespace tokenization.
pub fn split_words(raw: &str) -> impl Iterator<Item = String> + '_ {
    raw.split_whitespace().map(str::to_lowercase)
}

impl Vocab {
    /// Builds a vocabulary over all lines. Tokens seen fewer than `min_count`
    /// times are left out (they map to `<unk>`). Ordering: frequency
    /// descending, ties lexicographic.
    pub fn build<'a, I>(lines: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for line in lines {
            for w in split_words(line) {
                seen_any = true;
                if RESERVED.contains(&w.as_str()) {
                    continue;
                }
                *counts.entry(w).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(w, _)| w))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Checkpoint("vocabulary does not start with the reserved symbols".into()));
        }
        let v = Self::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::Checkpoint("vocabulary has duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out.into_bytes()
    }
}
