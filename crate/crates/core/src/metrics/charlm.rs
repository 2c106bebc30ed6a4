//! Character-level LSTM language model and perplexity.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamId, ParamStore};
use crate::persist::{Component, ComponentTag};
use crate::rng::{derive_seed, rng_from_seed, Rng, Stream};
use crate::tensor::{Graph, Tensor, Var};

/// Index 0 marks both the start and the end of a line; index 1 is the
/// unknown character.
const BOUNDARY: usize = 0;
const UNK_CHAR: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharLmDims {
    pub embed: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharLmTraining {
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct CharLm {
    pub chars: Vec<char>,
    pub dims: CharLmDims,
    pub store: ParamStore,
    embed: ParamId,
    gates: Linear,
    out: Linear,
}

impl CharLm {
    pub fn new(chars: Vec<char>, dims: CharLmDims, rng: &mut Rng) -> Self {
        let v = chars.len() + 2;
        let mut store = ParamStore::new();
        let embed = store.add("charlm.emb", Tensor::randn(&[v, dims.embed], 0.3, rng));
        let gates = Linear::new(&mut store, "charlm.gates", dims.embed + dims.hidden, 4 * dims.hidden, true, rng);
        let out = Linear::new(&mut store, "charlm.out", dims.hidden, v, true, rng);
        Self {
            chars,
            dims,
            store,
            embed,
            gates,
            out,
        }
    }

    /// Output alphabet size (characters plus boundary and unknown).
    pub fn alphabet(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| match self.chars.binary_search(&c) {
                Ok(i) => i + 2,
                Err(_) => UNK_CHAR,
            })
            .collect()
    }

    /// Summed NLL over every predicted character (including the final
    /// boundary) and the count of predictions, for equal-length rows.
    fn batch_nll(&self, g: &mut Graph, p: &crate::nn::Binding, rows: &[Vec<usize>]) -> Result<(Var, usize)> {
        let b = rows.len();
        let t = rows.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let h_dim = self.dims.hidden;
        let mut h = g.constant(Tensor::zeros(&[b, h_dim]));
        let mut c = g.constant(Tensor::zeros(&[b, h_dim]));
        let mut logits = Vec::with_capacity(t);
        let mut targets = Vec::with_capacity(t * b);
        for step in 0..t {
            let inputs: Vec<usize> = rows
                .iter()
                .map(|r| if step == 0 { BOUNDARY } else { r.get(step - 1).copied().unwrap_or(BOUNDARY) })
                .collect();
            let x = g.embedding(p[self.embed], &inputs)?;
            let xh = g.concat(&[x, h], 1)?;
            let z = self.gates.forward(g, p, xh)?;
            let i = g.slice(z, 1, 0, h_dim)?;
            let f = g.slice(z, 1, h_dim, h_dim)?;
            let o = g.slice(z, 1, 2 * h_dim, h_dim)?;
            let u = g.slice(z, 1, 3 * h_dim, h_dim)?;
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let o = g.sigmoid(o);
            let u = g.tanh(u);
            let fc = g.mul(f, c)?;
            let iu = g.mul(i, u)?;
            c = g.add(fc, iu)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;
            logits.push(self.out.forward(g, p, h)?);
            for r in rows {
                targets.push(match step.cmp(&r.len()) {
                    std::cmp::Ordering::Less => Some(r[step]),
                    std::cmp::Ordering::Equal => Some(BOUNDARY),
                    std::cmp::Ordering::Greater => None,
                });
            }
        }
        let all = g.concat(&logits, 0)?;
        let n = targets.iter().filter(|t| t.is_some()).count();
        let mean = g.cross_entropy(all, &targets)?;
        Ok((g.scale(mean, n as f32), n))
    }

    /// `exp(total NLL / predicted characters)` over `sentences`.
    pub fn perplexity<S: AsRef<str>>(&self, sentences: &[S]) -> Result<f64> {
        if sentences.is_empty() {
            return Err(Error::usage("perplexity over an empty set"));
        }
        let encoded: Vec<Vec<usize>> = sentences.iter().map(|s| self.encode(s.as_ref())).collect();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for chunk in encoded.chunks(64) {
            let mut g = Graph::new();
            let p = self.store.bind(&mut g, false);
            let (nll, n) = self.batch_nll(&mut g, &p, chunk)?;
            total += g.value(nll).item() as f64;
            count += n;
        }
        Ok((total / count as f64).exp())
    }

    pub fn component(&self) -> Component {
        let chars: String = self.chars.iter().collect();
        Component::from_store(
            ComponentTag::CharLm,
            &self.store,
            serde_json::json!({"chars": chars, "dims": self.dims}),
        )
    }

    pub fn from_component(c: &Component) -> Result<Self> {
        let chars: Vec<char> = c.meta["chars"]
            .as_str()
            .ok_or_else(|| Error::Checkpoint("char_lm alphabet missing".into()))?
            .chars()
            .collect();
        let dims: CharLmDims = serde_json::from_value(c.meta["dims"].clone())
            .map_err(|e| Error::Checkpoint(format!("char_lm dims: {e}")))?;
        let mut m = Self::new(chars, dims, &mut rng_from_seed(0));
        m.store.load_from(&c.params)?;
        Ok(m)
    }
}

pub fn train_char_lm<S: AsRef<str>>(text: &[S], dims: CharLmDims, opts: CharLmTraining, seed: u64) -> Result<CharLm> {
    if text.is_empty() {
        return Err(Error::data("the character LM needs training text"));
    }
    let chars: Vec<char> = text
        .iter()
        .flat_map(|s| s.as_ref().chars())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = rng_from_seed(derive_seed(seed, Stream::CharLm));
    let mut lm = CharLm::new(chars, dims, &mut rng);
    let encoded: Vec<Vec<usize>> = text.iter().map(|s| lm.encode(s.as_ref())).collect();
    let mut adam = lm.store.adam(opts.lr);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..opts.steps {
        if order.len() < opts.batch {
            let mut fresh: Vec<usize> = (0..encoded.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let take = opts.batch.min(order.len());
        let rows: Vec<Vec<usize>> = order.drain(..take).map(|i| encoded[i].clone()).collect();
        let mut g = Graph::new();
        let p = lm.store.bind(&mut g, true);
        let (nll, n) = lm.batch_nll(&mut g, &p, &rows)?;
        let loss = g.scale(nll, 1.0 / n as f32);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Training(format!("character LM loss became {lv} at step {step}")));
        }
        g.backward(loss)?;
        let grads = lm.store.grads(&g, &p);
        crate::nn::clipped_step(&mut [&mut lm.store], &mut [&mut adam], vec![grads], 1.0)?;
    }
    Ok(lm)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: CharLmDims = CharLmDims { embed: 8, hidden: 16 };

    #[test]
    fn uniform_predictor_has_alphabet_perplexity() {
        let mut lm = CharLm::new("abc".chars().collect(), DIMS, &mut rng_from_seed(1));
        let names: Vec<String> = lm.store.params().iter().map(|p| p.name.clone()).collect();
        let zeros: Vec<crate::nn::Param> = lm
            .store
            .params()
            .iter()
            .map(|p| crate::nn::Param {
                name: p.name.clone(),
                value: Tensor::zeros(p.value.shape()),
            })
            .collect();
        lm.store.load_from(&zeros).unwrap();
        assert_eq!(names.len(), zeros.len());
        let ppl = lm.perplexity(&["abcab", "ca"]).unwrap();
        assert!((ppl - 5.0).abs() < 1e-4, "{ppl}");
    }

    #[test]
    fn zero_entropy_text_approaches_one() {
        let text = vec!["aaaaaa"; 16];
        let opts = CharLmTraining { steps: 150, lr: 0.02, batch: 8 };
        let lm = train_char_lm(&text, DIMS, opts, 1).unwrap();
        let ppl = lm.perplexity(&text).unwrap();
        assert!(ppl < 1.1, "{ppl}");
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let lm = CharLm::new("ab".chars().collect(), DIMS, &mut rng_from_seed(1));
        assert_eq!(lm.encode("az"), vec![2, UNK_CHAR]);
        assert!(lm.perplexity(&["zz"]).unwrap().is_finite());
    }
}
