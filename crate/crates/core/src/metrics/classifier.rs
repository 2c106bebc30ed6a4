//! Linear style classifier over hashed unigram and bigram features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_words, StyleCorpus, StyleId};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::persist::{Component, ComponentTag};
use crate::rng::{derive_seed, rng_from_seed, Stream};
use crate::tensor::Tensor;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Signed hashed feature indices for a sentence (unigrams and bigrams).
pub fn hashed_features(text: &str, bits: u32) -> Vec<(usize, f32)> {
    let words: Vec<String> = split_words(text).collect();
    let mut grams: Vec<String> = words.clone();
    grams.extend(words.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    let mask = (1u64 << bits) - 1;
    grams
        .iter()
        .map(|g| {
            let h = fnv1a(g.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            ((h & mask) as usize, sign)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalClassifier {
    pub bits: u32,
    pub k: usize,
    /// `[2^bits, k]`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub lr: f32,
    pub bits: u32,
}

impl EvalClassifier {
    fn logits(&self, feats: &[(usize, f32)]) -> Vec<f32> {
        let mut out = self.bias.clone();
        for &(i, s) in feats {
            let row = &self.weights[i * self.k..(i + 1) * self.k];
            for (o, w) in out.iter_mut().zip(row) {
                *o += s * w;
            }
        }
        out
    }

    pub fn probabilities(&self, text: &str) -> Vec<f32> {
        let l = self.logits(&hashed_features(text, self.bits));
        softmax(&l)
    }

    pub fn predict(&self, text: &str) -> StyleId {
        crate::backbone::argmax(&self.logits(&hashed_features(text, self.bits)))
    }

    pub fn accuracy(&self, corpus: &StyleCorpus) -> f64 {
        let mut correct = 0;
        for (style, lines) in corpus.texts.iter().enumerate() {
            correct += lines.iter().filter(|l| self.predict(l) == style).count();
        }
        correct as f64 / corpus.len().max(1) as f64
    }

    pub fn component(&self) -> Component {
        let mut store = ParamStore::new();
        store.add("cls.w", Tensor::new(vec![1 << self.bits, self.k], self.weights.clone()).expect("shape"));
        store.add("cls.b", Tensor::vector(&self.bias));
        Component::from_store(ComponentTag::EvalClassifier, &store, serde_json::json!({"bits": self.bits, "k": self.k}))
    }

    pub fn from_component(c: &Component) -> Result<Self> {
        let bits = c.meta["bits"].as_u64().ok_or_else(|| Error::Checkpoint("classifier bits missing".into()))? as u32;
        let k = c.meta["k"].as_u64().ok_or_else(|| Error::Checkpoint("classifier k missing".into()))? as usize;
        let get = |n: &str| {
            c.params
                .iter()
                .find(|p| p.name == n)
                .ok_or_else(|| Error::Checkpoint(format!("classifier entry '{n}' missing")))
        };
        let w = get("cls.w")?;
        let b = get("cls.b")?;
        if w.value.numel() != (1usize << bits) * k || b.value.numel() != k {
            return Err(Error::Checkpoint("classifier shapes do not match its metadata".into()));
        }
        Ok(Self {
            bits,
            k,
            weights: w.value.data().to_vec(),
            bias: b.value.data().to_vec(),
        })
    }
}

fn softmax(l: &[f32]) -> Vec<f32> {
    let m = l.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = l.iter().map(|x| (x - m).exp()).collect();
    let z: f32 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Plain SGD on the softmax cross-entropy, one example at a time.
pub fn train_eval_classifier(corpus: &StyleCorpus, opts: ClassifierTraining, seed: u64) -> Result<EvalClassifier> {
    let populated = corpus.texts.iter().filter(|t| !t.is_empty()).count();
    if populated < 2 {
        return Err(Error::usage("the evaluation classifier needs sentences from at least two styles"));
    }
    let k = corpus.k();
    let mut model = EvalClassifier {
        bits: opts.bits,
        k,
        weights: vec![0.0; (1usize << opts.bits) * k],
        bias: vec![0.0; k],
    };
    let examples: Vec<(Vec<(usize, f32)>, StyleId)> = corpus
        .texts
        .iter()
        .enumerate()
        .flat_map(|(s, lines)| lines.iter().map(move |l| (hashed_features(l, opts.bits), s)))
        .collect();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = rng_from_seed(derive_seed(seed, Stream::EvalClassifier));
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (feats, y) = &examples[i];
            let mut p = softmax(&model.logits(feats));
            p[*y] -= 1.0;
            for &(f, s) in feats {
                let row = &mut model.weights[f * k..(f + 1) * k];
                for (w, g) in row.iter_mut().zip(&p) {
                    *w -= opts.lr * s * g;
                }
            }
            for (b, g) in model.bias.iter_mut().zip(&p) {
                *b -= opts.lr * g;
            }
        }
    }
    Ok(model)
}

/// Percentage of `texts` classified as `target`.
pub fn transfer_accuracy<S: AsRef<str>>(classifier: &EvalClassifier, texts: &[S], target: StyleId) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::usage("transfer accuracy over an empty set"));
    }
    let hits = texts.iter().filter(|t| classifier.predict(t.as_ref()) == target).count();
    Ok(100.0 * hits as f64 / texts.len() as f64)
}
