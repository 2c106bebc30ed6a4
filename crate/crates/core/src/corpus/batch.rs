use rand::seq::SliceRandom;

use super::{Sentence, StyleId, PAD};
use crate::error::{Error, Result};
use crate::nn::SeqShape;
use crate::rng::Rng;

/// Padded mini-batch. `ids` and `pad` are row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
    pub styles: Vec<StyleId>,
    /// Positions of the rows in the sentence list the batch was cut from.
    pub indices: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    pub fn from_sentences(sentences: &[&Sentence], indices: Vec<usize>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let len = sentences.iter().map(|s| s.tokens.len()).max().unwrap();
        let batch = sentences.len();
        let mut ids = vec![PAD; batch * len];
        let mut pad = vec![true; batch * len];
        for (r, s) in sentences.iter().enumerate() {
            for (j, &t) in s.tokens.iter().enumerate() {
                ids[r * len + j] = t;
                pad[r * len + j] = false;
            }
        }
        Ok(Self {
            ids,
            pad,
            styles: sentences.iter().map(|s| s.style).collect(),
            indices,
            batch,
            len,
        })
    }

    pub fn shape(&self) -> SeqShape {
        SeqShape {
            batch: self.batch,
            len: self.len,
        }
    }

    pub fn non_pad_tokens(&self) -> usize {
        self.pad.iter().filter(|&&p| !p).count()
    }

    /// Teacher-forcing view: decoder inputs are `tokens[..T-1]`, targets are
    /// `tokens[1..]`, with padded targets set to `None`.
    pub fn decoder_io(&self) -> (Vec<usize>, Vec<Option<usize>>, SeqShape) {
        let t = self.len - 1;
        let mut input = Vec::with_capacity(self.batch * t);
        let mut targets = Vec::with_capacity(self.batch * t);
        for r in 0..self.batch {
            let row = &self.ids[r * self.len..(r + 1) * self.len];
            let prow = &self.pad[r * self.len..(r + 1) * self.len];
            input.extend_from_slice(&row[..t]);
            for j in 1..self.len {
                targets.push((!prow[j]).then_some(row[j]));
            }
        }
        (input, targets, SeqShape { batch: self.batch, len: t })
    }
}

/// Shuffles with `rng`, then packs sentences greedily in that order so that no
/// batch exceeds `token_budget` non-pad tokens.
pub fn batch_by_tokens(sentences: &[Sentence], token_budget: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
    if let Some(s) = sentences.iter().find(|s| s.tokens.len() > token_budget) {
        return Err(Error::data(format!(
            "sentence of {} tokens exceeds the batch budget of {token_budget}",
            s.tokens.len()
        )));
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = 0;
    for i in order {
        let n = sentences[i].tokens.len();
        if used + n > token_budget && !current.is_empty() {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
        .into_iter()
        .map(|idx| {
            let rows: Vec<&Sentence> = idx.iter().map(|&i| &sentences[i]).collect();
            Batch::from_sentences(&rows, idx)
        })
        .collect()
}
