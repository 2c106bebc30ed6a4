//! Two-or-more-style synthetic corpora with disjoint style-marker lexicons.
//!
//! Every sentence instantiates a template: `{a}` slots take anchor
//! (style-neutral content) words, `{m}` slots take markers from the
//! sentence's own style lexicon, so the style label is correct by
//! construction.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::{StyleCorpus, StyleId};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const ANCHOR_SLOT: &str = "{a}";
pub const MARKER_SLOT: &str = "{m}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub style_names: Vec<String>,
    pub marker_lexicons: Vec<Vec<String>>,
    pub anchor_lexicon: Vec<String>,
    /// Whitespace-separated patterns with `{a}` and `{m}` slots.
    pub templates: Vec<String>,
    pub n_per_style: usize,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            style_names: vec!["negative".into(), "positive".into()],
            marker_lexicons: vec![
                words("awful bland rude terrible horrible dirty"),
                words("great tasty friendly lovely excellent clean"),
            ],
            anchor_lexicon: words(
                "food service staff waiter pizza room price menu coffee table \
                 view music dessert bread soup salad wine chef lunch dinner",
            ),
            templates: [
                "the {a} was {m}",
                "the {a} here is {m}",
                "our {a} was {m} and so was the {a}",
                "the {a} and the {a} were {m}",
                "we ordered the {a} and it was {m}",
                "the {a} , the {a} and the {a} were all {m}",
                "i found the {a} {m} but the {a} was okay",
                "honestly the {a} was {m}",
            ]
            .map(String::from)
            .to_vec(),
            n_per_style: 1000,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let k = self.marker_lexicons.len();
        if k < 2 || self.style_names.len() != k {
            return Err(Error::usage("need one style name per marker lexicon and at least 2 styles"));
        }
        if self.anchor_lexicon.is_empty() || self.marker_lexicons.iter().any(Vec::is_empty) {
            return Err(Error::usage("lexicons must be nonempty"));
        }
        if self.templates.is_empty() {
            return Err(Error::usage("need at least one template"));
        }
        let mut seen: HashSet<&str> = self.anchor_lexicon.iter().map(String::as_str).collect();
        if seen.len() != self.anchor_lexicon.len() {
            return Err(Error::usage("anchor lexicon has duplicates"));
        }
        for lex in &self.marker_lexicons {
            for m in lex {
                if !seen.insert(m) {
                    return Err(Error::usage(format!(
                        "marker '{m}' overlaps another lexicon"
                    )));
                }
            }
        }
        for t in &self.templates {
            let slots: Vec<&str> = t.split_whitespace().collect();
            if !slots.contains(&MARKER_SLOT) {
                return Err(Error::usage(format!("template '{t}' has no {MARKER_SLOT} slot")));
            }
            if let Some(w) = slots.iter().find(|w| **w != ANCHOR_SLOT && **w != MARKER_SLOT && seen.contains(*w)) {
                return Err(Error::usage(format!("template word '{w}' is also a lexicon word")));
            }
        }
        Ok(())
    }
}

/// One line of the generator manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub text: String,
    pub style: StyleId,
    pub markers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub corpus: StyleCorpus,
    pub records: Vec<ManifestRecord>,
}

pub fn gen_synthetic_corpus(seed: u64, spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let k = spec.marker_lexicons.len();
    let mut texts = vec![Vec::with_capacity(spec.n_per_style); k];
    let mut records = Vec::with_capacity(k * spec.n_per_style);
    for style in 0..k {
        for _ in 0..spec.n_per_style {
            let template = spec.templates.choose(&mut rng).unwrap();
            let mut sentence = Vec::new();
            let mut markers = Vec::new();
            for slot in template.split_whitespace() {
                let word = match slot {
                    ANCHOR_SLOT => spec.anchor_lexicon.choose(&mut rng).unwrap().clone(),
                    MARKER_SLOT => {
                        let m = spec.marker_lexicons[style].choose(&mut rng).unwrap().clone();
                        markers.push(m.clone());
                        m
                    }
                    w => w.to_string(),
                };
                sentence.push(word);
            }
            let text = sentence.join(" ");
            texts[style].push(text.clone());
            records.push(ManifestRecord {
                text,
                style,
                markers,
            });
        }
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        corpus: StyleCorpus::new(spec.style_names.clone(), texts)?,
        records,
    })
}

impl SyntheticCorpus {
    pub fn manifest_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("manifest record serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes `<style>.txt` files and `manifest.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.corpus.write_dir(dir)?;
        crate::persist::write_atomic(&dir.join("manifest.jsonl"), self.manifest_jsonl().as_bytes())
    }

    pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        body.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Which style lexicon a word belongs to, if any.
pub fn marker_style(spec: &SyntheticSpec, word: &str) -> Option<StyleId> {
    spec.marker_lexicons
        .iter()
        .position(|lex| lex.iter().any(|m| m == word))
}
