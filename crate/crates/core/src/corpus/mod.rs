//! Vocabulary, tokenization, batching and corpus files.

mod batch;
mod synthetic;
mod vocab;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use batch::{batch_by_tokens, Batch};
pub use synthetic::{gen_synthetic_corpus, marker_style, ManifestRecord, SyntheticCorpus, SyntheticSpec};
pub use vocab::{is_reserved, split_words, Vocab, BOS, DEFAULT_MAX_LEN, EOS, MASK, PAD, RESERVED, UNK};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type StyleId = usize;

/// A tokenized sentence: `<s> content... </s>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub raw: String,
    pub tokens: Vec<usize>,
    pub style: StyleId,
}

impl Sentence {
    /// Content tokens (without `<s>` / `</s>`).
    pub fn content(&self) -> &[usize] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content().is_empty()
    }
}

/// Result of [`tokenize`]; `truncated` is set when content exceeded `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub sentence: Sentence,
    pub truncated: bool,
}

pub fn tokenize(raw: &str, vocab: &Vocab, style: StyleId, max_len: usize) -> Result<Tokenized> {
    let mut content: Vec<usize> = split_words(raw).map(|w| vocab.id(&w)).collect();
    if content.is_empty() {
        return Err(Error::data("cannot tokenize an empty sentence"));
    }
    let truncated = content.len() > max_len;
    content.truncate(max_len);
    let mut tokens = Vec::with_capacity(content.len() + 2);
    tokens.push(BOS);
    tokens.extend(content);
    tokens.push(EOS);
    Ok(Tokenized {
        sentence: Sentence {
            raw: raw.to_string(),
            tokens,
            style,
        },
        truncated,
    })
}

/// Joins content tokens with single spaces; reserved symbols other than
/// `<unk>` and `<mask>` are dropped, and decoding stops at `</s>`.
pub fn detokenize(tokens: &[usize], vocab: &Vocab) -> String {
    let mut words = Vec::new();
    for &t in tokens {
        match t {
            EOS => break,
            PAD | BOS => continue,
            _ => words.push(vocab.token(t)),
        }
    }
    words.join(" ")
}

/// Raw sentences grouped by style. Style ids are positions in `names`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleCorpus {
    pub names: Vec<String>,
    pub texts: Vec<Vec<String>>,
}

impl StyleCorpus {
    pub fn new(names: Vec<String>, texts: Vec<Vec<String>>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::data(format!("need at least 2 styles, got {}", names.len())));
        }
        if names.len() != texts.len() {
            return Err(Error::usage("style names and text groups differ in length"));
        }
        Ok(Self { names, texts })
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.texts.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.texts.iter().flatten().map(String::as_str)
    }

    pub fn style_id(&self, name: &str) -> Result<StyleId> {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            return Ok(i);
        }
        match name.parse::<usize>() {
            Ok(i) if i < self.k() => Ok(i),
            _ => Err(Error::usage(format!(
                "unknown style '{name}' (known: {})",
                self.names.join(", ")
            ))),
        }
    }

    /// Tokenizes every line. Over-long lines are truncated.
    pub fn sentences(&self, vocab: &Vocab, max_len: usize) -> Result<Vec<Sentence>> {
        let mut out = Vec::with_capacity(self.len());
        for (style, lines) in self.texts.iter().enumerate() {
            for line in lines {
                let t = tokenize(line, vocab, style, max_len)?;
                if t.truncated {
                    log::warn!("truncated sentence to {max_len} tokens: {line}");
                }
                out.push(t.sentence);
            }
        }
        Ok(out)
    }

    /// Reads `<style>.txt` files from `dir`; style ids follow sorted file names.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        let mut names = Vec::new();
        let mut texts = Vec::new();
        for f in files {
            let body = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            let lines: Vec<String> = body
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            if lines.is_empty() {
                return Err(Error::data(format!("{} has no sentences", f.display())));
            }
            names.push(f.file_stem().unwrap().to_string_lossy().into_owned());
            texts.push(lines);
        }
        Self::new(names, texts)
    }

    /// Writes one `<style>.txt` per style (LF line endings).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, lines) in self.names.iter().zip(&self.texts) {
            let mut body = lines.join("\n");
            body.push('\n');
            crate::persist::write_atomic(&dir.join(format!("{name}.txt")), body.as_bytes())?;
        }
        Ok(())
    }

    /// Deterministic per-style split into (train, held-out).
    pub fn split(&self, held_out_fraction: f64, rng: &mut Rng) -> Result<(StyleCorpus, StyleCorpus)> {
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::usage(format!("held-out fraction {held_out_fraction} not in [0,1)")));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for lines in &self.texts {
            let mut idx: Vec<usize> = (0..lines.len()).collect();
            idx.shuffle(rng);
            let n_test = ((lines.len() as f64) * held_out_fraction).round() as usize;
            let (te, tr) = idx.split_at(n_test);
            let mut te = te.to_vec();
            let mut tr = tr.to_vec();
            te.sort_unstable();
            tr.sort_unstable();
            test.push(te.iter().map(|&i| lines[i].clone()).collect());
            train.push(tr.iter().map(|&i| lines[i].clone()).collect());
        }
        Ok((
            StyleCorpus::new(self.names.clone(), train)?,
            StyleCorpus::new(self.names.clone(), test)?,
        ))
    }
}
