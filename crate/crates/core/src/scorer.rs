//! Style classifier on frozen backbone features, attention-based token
//! importance, and stochastic pivot-word masking.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, assemble_features, BackboneModel};
use crate::config::ScorerConfig;
use crate::corpus::{batch_by_tokens, Batch, Sentence, MASK};
use crate::error::{Error, Result};
use crate::nn::{attention_mask, Binding, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore, SeqShape};
use crate::persist::{Component, ComponentTag};
use crate::rng::{derive_seed, rng_from_seed, Rng, Stream};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerDims {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub k: usize,
    pub gamma: f32,
}

/// One attention layer appended to the frozen backbone. The first token
/// attends over the content tokens only, and its attention output (not the
/// residual stream, which already summarizes the sentence in a bidirectional
/// backbone) goes through a feed-forward sublayer into a linear softmax
/// classifier.
#[derive(Clone, Debug)]
pub struct ScorerModel {
    pub dims: ScorerDims,
    pub store: ParamStore,
    ln_in: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
    ln_out: LayerNorm,
    head: Linear,
}

struct ScorerForward {
    logits: Var,
    q: Var,
    k: Var,
}

/// `pad` with each row's first and last real token (BOS, EOS) also blocked.
fn content_keys(pad: &[bool], s: SeqShape) -> Vec<bool> {
    let mut keys = pad.to_vec();
    for row in keys.chunks_mut(s.len) {
        let last = row.iter().rposition(|&p| !p).unwrap_or(0);
        row[0] = true;
        row[last] = true;
    }
    keys
}

impl ScorerModel {
    pub fn new(dims: ScorerDims, rng: &mut Rng) -> Result<Self> {
        if !(dims.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", dims.gamma)));
        }
        let mut store = ParamStore::new();
        let d = dims.d_model;
        let ln_in = LayerNorm::new(&mut store, "scorer.ln_in", d);
        let attn = MultiHeadAttention::new(&mut store, "scorer.attn", d, dims.heads, rng)?;
        let ln_ffn = LayerNorm::new(&mut store, "scorer.ln_ffn", d);
        let ffn = FeedForward::new(&mut store, "scorer.ffn", d, dims.ffn_dim, rng);
        let ln_out = LayerNorm::new(&mut store, "scorer.ln_out", d);
        let head = Linear::new(&mut store, "scorer.head", d, dims.k, true, rng);
        Ok(Self {
            dims,
            store,
            ln_in,
            attn,
            ln_ffn,
            ffn,
            ln_out,
            head,
        })
    }

    fn forward(&self, g: &mut Graph, p: &Binding, feats: Var, pad: &[bool], s: SeqShape) -> Result<ScorerForward> {
        let mask = g.constant(attention_mask(&content_keys(pad, s), s.batch, s.len, self.dims.heads, false));
        let h = self.ln_in.forward(g, p, feats)?;
        let att = self.attn.forward(g, p, h, s, mask)?;
        let first: Vec<usize> = (0..s.batch).map(|b| b * s.len).collect();
        let h = g.gather_rows(att.out, &first)?;
        let f = self.ln_ffn.forward(g, p, h)?;
        let f = self.ffn.forward(g, p, f)?;
        let h = g.add(h, f)?;
        let h = self.ln_out.forward(g, p, h)?;
        Ok(ScorerForward {
            logits: self.head.forward(g, p, h)?,
            q: att.q,
            k: att.k,
        })
    }

    /// Predicted style for each row of a batch with cached features.
    pub fn classify(&self, feats: &Tensor, batch: &Batch) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let f = g.constant(feats.clone());
        let out = self.forward(&mut g, &p, f, &batch.pad, batch.shape())?;
        Ok(g.value(out.logits).data().chunks(self.dims.k).map(argmax).collect())
    }

    /// Importance of each content token from the sentence's `[T, d]` features.
    pub fn importance_scores(&self, feats: &Tensor, sentence: &Sentence) -> Result<Vec<f32>> {
        let t = sentence.tokens.len();
        if t < 3 {
            return Err(Error::usage("importance scores need at least one content token"));
        }
        if feats.shape() != [t, self.dims.d_model] {
            return Err(Error::usage(format!(
                "features {:?} do not match a sentence of {t} tokens",
                feats.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let f = g.constant(feats.clone());
        let s = SeqShape { batch: 1, len: t };
        let out = self.forward(&mut g, &p, f, &vec![false; t], s)?;
        let (q, k) = (g.value(out.q), g.value(out.k));
        let dh = self.dims.d_model / self.dims.heads;
        let mut q0 = Vec::with_capacity(self.dims.heads);
        let mut keys = Vec::with_capacity(self.dims.heads);
        for h in 0..self.dims.heads {
            let base = h * t * dh;
            q0.push(q.data()[base..base + dh].to_vec());
            keys.push(
                (1..t - 1)
                    .map(|j| k.data()[base + j * dh..base + (j + 1) * dh].to_vec())
                    .collect::<Vec<_>>(),
            );
        }
        importance_from_qk(&q0, &keys, self.dims.gamma)
    }

    pub fn component(&self) -> Component {
        Component::from_store(ComponentTag::Scorer, &self.store, serde_json::json!({"dims": self.dims}))
    }

    pub fn from_component(c: &Component) -> Result<Self> {
        let dims: ScorerDims = serde_json::from_value(c.meta["dims"].clone())
            .map_err(|e| Error::Checkpoint(format!("scorer dims: {e}")))?;
        let mut m = Self::new(dims, &mut rng_from_seed(0))?;
        m.store.load_from(&c.params)?;
        Ok(m)
    }
}

/// `α(w) = (1/L) Σ_heads softmax_w(q_<s> · k_w / γ)` over content tokens.
/// `q0[h]` is the first-token query of head `h`; `keys[h][w]` the key of
/// content token `w`.
pub fn importance_from_qk(q0: &[Vec<f32>], keys: &[Vec<Vec<f32>>], gamma: f32) -> Result<Vec<f32>> {
    if q0.is_empty() || q0.len() != keys.len() {
        return Err(Error::usage("need one key set per head"));
    }
    let n = keys[0].len();
    if n == 0 {
        return Err(Error::usage("no content tokens to score"));
    }
    let mut alpha = vec![0.0f64; n];
    for (q, ks) in q0.iter().zip(keys) {
        if ks.len() != n {
            return Err(Error::usage("heads disagree on the number of tokens"));
        }
        let logits: Vec<f64> = ks
            .iter()
            .map(|k| q.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / gamma as f64)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, x) in alpha.iter_mut().zip(e) {
            *a += x / z;
        }
    }
    let heads = q0.len() as f64;
    Ok(alpha.into_iter().map(|a| (a / heads) as f32).collect())
}

/// Random draws and outcome of masking one sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub selected: bool,
    /// One uniform draw per content token.
    pub draws: Vec<f64>,
    pub masked: Vec<bool>,
}

impl MaskPlan {
    pub fn n_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Selects the sentence with probability `fraction`, then draws `p_i` for
/// every content token and masks those with `p_i < α_i`. The selection draw
/// comes first and the token draws are always consumed, so the stream is
/// the same whether or not the sentence is selected.
pub fn mask_sentence(sentence: &Sentence, scores: &[f32], fraction: f64, rng: &mut Rng) -> Result<(Sentence, MaskPlan)> {
    let n = sentence.content().len();
    if scores.len() != n {
        return Err(Error::usage(format!(
            "{} scores for a sentence with {n} content tokens",
            scores.len()
        )));
    }
    let selected = rng.random::<f64>() < fraction;
    let draws: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let masked: Vec<bool> = draws
        .iter()
        .zip(scores)
        .map(|(&p, &a)| selected && p < a as f64)
        .collect();
    let mut out = sentence.clone();
    for (i, &m) in masked.iter().enumerate() {
        if m {
            out.tokens[i + 1] = MASK;
        }
    }
    Ok((
        out,
        MaskPlan {
            selected,
            draws,
            masked,
        },
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScorerReport {
    pub losses: Vec<f32>,
    pub held_out_accuracy: f64,
}

pub fn classifier_accuracy(model: &ScorerModel, sentences: &[Sentence], cache: &[Tensor]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::usage("accuracy over an empty set"));
    }
    let mut correct = 0;
    for (c, chunk) in sentences.chunks(64).enumerate() {
        let rows: Vec<&Sentence> = chunk.iter().collect();
        let idx: Vec<usize> = (0..chunk.len()).map(|i| c * 64 + i).collect();
        let b = Batch::from_sentences(&rows, idx)?;
        let f = assemble_features(cache, &b)?;
        let pred = model.classify(&f, &b)?;
        correct += pred.iter().zip(&b.styles).filter(|(p, s)| p == s).count();
    }
    Ok(correct as f64 / sentences.len() as f64)
}

/// Trains the appended block and classifier head; the backbone is only read.
pub fn train_style_classifier(
    backbone: &BackboneModel,
    train: &[Sentence],
    held_out: &[Sentence],
    k: usize,
    cfg: &ScorerConfig,
    seed: u64,
) -> Result<(ScorerModel, ScorerReport)> {
    let dims = ScorerDims {
        d_model: backbone.d_model(),
        heads: cfg.heads,
        ffn_dim: cfg.ffn_dim,
        k,
        gamma: cfg.gamma,
    };
    let mut model = ScorerModel::new(dims, &mut rng_from_seed(derive_seed(seed, Stream::ScorerInit)))?;
    let cache = backbone.feature_cache(train)?;
    let mut rng = rng_from_seed(derive_seed(seed, Stream::ScorerTrain));
    let mut adam = model.store.adam(cfg.lr);
    let mut report = ScorerReport::default();
    let mut step = 0;
    while step < cfg.steps {
        for batch in batch_by_tokens(train, cfg.token_budget, &mut rng)? {
            if step >= cfg.steps {
                break;
            }
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, true);
            let f = g.constant(assemble_features(&cache, &batch)?);
            let out = model.forward(&mut g, &p, f, &batch.pad, batch.shape())?;
            let targets: Vec<Option<usize>> = batch.styles.iter().map(|&s| Some(s)).collect();
            let loss = g.cross_entropy(out.logits, &targets)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Training(format!("style classifier loss became {lv} at step {step}")));
            }
            g.backward(loss)?;
            let grads = model.store.grads(&g, &p);
            crate::nn::clipped_step(&mut [&mut model.store], &mut [&mut adam], vec![grads], 1.0)?;
            report.losses.push(lv);
            step += 1;
        }
    }
    if !held_out.is_empty() {
        let hc = backbone.feature_cache(held_out)?;
        report.held_out_accuracy = classifier_accuracy(&model, held_out, &hc)?;
        log::info!("style classifier held-out accuracy {:.4}", report.held_out_accuracy);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS, EOS};

    fn sent(content: &[usize]) -> Sentence {
        let mut tokens = vec![BOS];
        tokens.extend_from_slice(content);
        tokens.push(EOS);
        Sentence {
            raw: String::new(),
            tokens,
            style: 0,
        }
    }

    #[test]
    fn uniform_logits_give_uniform_scores() {
        let q = vec![vec![0.0, 0.0]];
        let keys = vec![vec![vec![1.0, 2.0]; 4]];
        let a = importance_from_qk(&q, &keys, 0.05).unwrap();
        assert!(a.iter().all(|&x| (x - 0.25).abs() < 1e-7));
    }

    #[test]
    fn single_head_equals_its_softmax() {
        let q = vec![vec![1.0]];
        let keys = vec![vec![vec![0.0], vec![1.0]]];
        let a = importance_from_qk(&q, &keys, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((a[1] as f64 - e / (1.0 + e)).abs() < 1e-6);
    }

    #[test]
    fn smaller_gamma_sharpens() {
        let q = vec![vec![0.3, -0.1], vec![0.2, 0.4]];
        let ks = vec![vec![0.1, 0.2], vec![0.5, -0.3], vec![-0.2, 0.1]];
        let keys = vec![ks.clone(), ks];
        let sharp = importance_from_qk(&q, &keys, 0.01).unwrap();
        let soft = importance_from_qk(&q, &keys, 1.0).unwrap();
        let top = (0..3).max_by(|&i, &j| soft[i].total_cmp(&soft[j])).unwrap();
        assert!(sharp[top] > soft[top]);
        assert!((sharp.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_scores_never_mask() {
        let s = sent(&[7, 8, 9]);
        let (m, plan) = mask_sentence(&s, &[0.0; 3], 1.0, &mut rng_from_seed(1)).unwrap();
        assert_eq!(m, s);
        assert!(plan.selected);
    }

    #[test]
    fn mask_pattern_follows_recorded_draws() {
        let s = sent(&[7, 8, 9]);
        let alpha = [0.9, 0.1, 0.5];
        let (m, plan) = mask_sentence(&s, &alpha, 1.0, &mut rng_from_seed(42)).unwrap();
        let mut rng = rng_from_seed(42);
        let _sel: f64 = rng.random();
        for (i, &a) in alpha.iter().enumerate() {
            let p: f64 = rng.random();
            assert_eq!(plan.draws[i], p);
            assert_eq!(plan.masked[i], p < a as f64);
            assert_eq!(m.tokens[i + 1] == MASK, p < a as f64);
        }
        assert_eq!(m.tokens.len(), s.tokens.len());
        assert_eq!((m.tokens[0], *m.tokens.last().unwrap()), (BOS, EOS));
    }

    #[test]
    fn misaligned_scores_are_rejected() {
        assert!(mask_sentence(&sent(&[7, 8]), &[0.5], 0.5, &mut rng_from_seed(1)).is_err());
    }
}
