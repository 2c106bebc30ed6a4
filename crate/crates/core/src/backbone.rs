//! Contextual feature extractor: a small transformer encoder pre-trained with
//! masked-token prediction, or a plain embedding table in identity mode.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{BackboneConfig, BackboneMode};
use crate::corpus::{batch_by_tokens, Batch, Sentence, BOS, EOS, MASK, PAD};
use crate::error::{Error, Result};
use crate::nn::{attention_mask, Binding, BlockDims, Embeddings, Linear, ParamStore, SeqShape, TransformerStack};
use crate::persist::{Component, ComponentTag};
use crate::rng::{derive_seed, rng_from_seed, Rng, Stream};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDims {
    pub mode: BackboneMode,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    /// Longest sequence including `<s>` and `</s>`.
    pub max_len: usize,
}

impl BackboneDims {
    pub fn from_config(c: &BackboneConfig, vocab: usize, max_content_len: usize) -> Self {
        Self {
            mode: c.mode,
            layers: c.layers,
            d_model: c.d_model,
            heads: c.heads,
            ffn_dim: c.ffn_dim,
            vocab,
            max_len: max_content_len + 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackboneModel {
    pub dims: BackboneDims,
    pub store: ParamStore,
    emb: Embeddings,
    stack: Option<TransformerStack>,
    mlm_head: Option<Linear>,
    pub frozen: bool,
    pub final_mlm_loss: Option<f32>,
}

impl BackboneModel {
    pub fn new(dims: BackboneDims, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let emb = Embeddings::new(&mut store, "backbone.emb", dims.vocab, dims.max_len, dims.d_model, rng);
        let (stack, mlm_head) = match dims.mode {
            BackboneMode::Mlm => {
                let block = BlockDims {
                    d_model: dims.d_model,
                    heads: dims.heads,
                    d_ff: dims.ffn_dim,
                };
                let stack = TransformerStack::new(&mut store, "backbone.enc", dims.layers, block, rng)?;
                let head = Linear::new(&mut store, "backbone.mlm", dims.d_model, dims.vocab, true, rng);
                (Some(stack), Some(head))
            }
            BackboneMode::Identity => (None, None),
        };
        Ok(Self {
            dims,
            store,
            emb,
            stack,
            mlm_head,
            frozen: false,
            final_mlm_loss: None,
        })
    }

    pub fn d_model(&self) -> usize {
        self.dims.d_model
    }

    /// Contextual vectors `[B*T, d]` for a padded id matrix.
    pub fn forward(&self, g: &mut Graph, p: &Binding, ids: &[usize], pad: &[bool], s: SeqShape) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.dims.vocab) {
            return Err(Error::usage(format!(
                "token id {bad} outside the backbone vocabulary of {} (vocab mismatch?)",
                self.dims.vocab
            )));
        }
        let x = self.emb.forward(g, p, ids, s)?;
        match &self.stack {
            Some(stack) => {
                let mask = g.constant(attention_mask(pad, s.batch, s.len, self.dims.heads, false));
                stack.forward(g, p, x, s, mask)
            }
            None => Ok(x),
        }
    }

    /// Features for a batch as a `[B, L, d]` tensor.
    pub fn encode_features(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let h = self.forward(&mut g, &p, &batch.ids, &batch.pad, batch.shape())?;
        g.value(h).clone().reshape(&[batch.batch, batch.len, self.dims.d_model])
    }

    /// Per-sentence feature cache: entry `i` is `[len_i, d]` for `sentences[i]`.
    pub fn feature_cache(&self, sentences: &[Sentence]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(64) {
            let rows: Vec<&Sentence> = chunk.iter().collect();
            let b = Batch::from_sentences(&rows, (0..rows.len()).collect())?;
            let f = self.encode_features(&b)?;
            let d = self.dims.d_model;
            for (r, s) in chunk.iter().enumerate() {
                let start = r * b.len * d;
                let data = f.data()[start..start + s.tokens.len() * d].to_vec();
                out.push(Tensor::new(vec![s.tokens.len(), d], data)?);
            }
        }
        Ok(out)
    }

    fn mlm_logits(&self, g: &mut Graph, p: &Binding, ids: &[usize], pad: &[bool], s: SeqShape) -> Result<Var> {
        let head = self
            .mlm_head
            .as_ref()
            .ok_or_else(|| Error::usage("identity-mode backbone has no masked-token head"))?;
        let h = self.forward(g, p, ids, pad, s)?;
        head.forward(g, p, h)
    }

    /// Argmax prediction at every position of a batch.
    pub fn predict_tokens(&self, batch: &Batch) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let logits = self.mlm_logits(&mut g, &p, &batch.ids, &batch.pad, batch.shape())?;
        let v = self.dims.vocab;
        Ok(g.value(logits)
            .data()
            .chunks(v)
            .map(|row| argmax(row))
            .collect())
    }

    pub fn component(&self) -> Component {
        Component::from_store(
            ComponentTag::Backbone,
            &self.store,
            serde_json::json!({
                "dims": self.dims,
                "frozen": self.frozen,
                "final_mlm_loss": self.final_mlm_loss,
            }),
        )
    }

    pub fn from_component(c: &Component) -> Result<Self> {
        let dims: BackboneDims = serde_json::from_value(c.meta["dims"].clone())
            .map_err(|e| Error::Checkpoint(format!("backbone dims: {e}")))?;
        let mut m = Self::new(dims, &mut rng_from_seed(0))?;
        m.store.load_from(&c.params)?;
        m.frozen = c.meta["frozen"].as_bool().unwrap_or(true);
        m.final_mlm_loss = c.meta["final_mlm_loss"].as_f64().map(|x| x as f32);
        Ok(m)
    }
}

/// Stacks cached per-sentence features into a padded `[B*T, d]` tensor;
/// padding rows are zero.
pub fn assemble_features(cache: &[Tensor], batch: &Batch) -> Result<Tensor> {
    let d = cache.first().map_or(0, |t| t.shape()[1]);
    let mut data = vec![0.0f32; batch.batch * batch.len * d];
    for (r, &i) in batch.indices.iter().enumerate() {
        let f = cache
            .get(i)
            .ok_or_else(|| Error::usage(format!("no cached features for sentence {i}")))?;
        let n = f.shape()[0];
        if n > batch.len {
            return Err(Error::usage("cached features longer than the batch"));
        }
        data[r * batch.len * d..(r * batch.len + n) * d].copy_from_slice(f.data());
    }
    Tensor::new(vec![batch.batch * batch.len, d], data)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    pub step_losses: Vec<f32>,
    pub epoch_means: Vec<f32>,
    pub initial_loss: f32,
    pub final_loss: f32,
}

/// Picks a random `rate` share of content tokens (at least one per
/// sentence) as targets; each becomes `<mask>` with probability 0.8, a
/// random word with 0.1, and stays unchanged otherwise. Returns the
/// corrupted ids and the CE targets.
fn mlm_corrupt(batch: &Batch, rate: f64, vocab_len: usize, rng: &mut Rng) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut ids = batch.ids.clone();
    let mut targets = vec![None; ids.len()];
    for r in 0..batch.batch {
        let row = r * batch.len..(r + 1) * batch.len;
        let content: Vec<usize> = row
            .filter(|&i| !matches!(batch.ids[i], PAD | BOS | EOS) && !batch.pad[i])
            .collect();
        let mut chosen: Vec<usize> = content.iter().copied().filter(|_| rng.random_bool(rate)).collect();
        if chosen.is_empty() {
            if let Some(&i) = content.choose(rng) {
                chosen.push(i);
            }
        }
        for i in chosen {
            targets[i] = Some(batch.ids[i]);
            let u: f64 = rng.random();
            if u < 0.8 {
                ids[i] = MASK;
            } else if u < 0.9 {
                ids[i] = rng.random_range(crate::corpus::RESERVED.len()..vocab_len);
            }
        }
    }
    (ids, targets)
}

/// Pre-trains a fresh backbone with masked-token prediction and returns it
/// frozen (unless `cfg.trainable`). Identity mode skips training.
pub fn pretrain_backbone_mlm(
    sentences: &[Sentence],
    dims: BackboneDims,
    cfg: &BackboneConfig,
    seed: u64,
) -> Result<(BackboneModel, MlmReport)> {
    let mut model = BackboneModel::new(dims, &mut rng_from_seed(derive_seed(seed, Stream::BackboneInit)))?;
    let mut report = MlmReport::default();
    if dims.mode == BackboneMode::Identity {
        return Ok((model, report));
    }
    if sentences.is_empty() {
        return Err(Error::data("masked-token pre-training needs a nonempty corpus"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, Stream::BackboneTrain));
    let mut adam = model.store.adam(cfg.lr);
    let mut step = 0;
    while step < cfg.steps {
        let batches = batch_by_tokens(sentences, cfg.token_budget, &mut rng)?;
        let mut epoch = Vec::new();
        for batch in batches {
            if step >= cfg.steps {
                break;
            }
            let (ids, targets) = mlm_corrupt(&batch, cfg.mask_rate, dims.vocab, &mut rng);
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, true);
            let logits = model.mlm_logits(&mut g, &p, &ids, &batch.pad, batch.shape())?;
            let loss = g.cross_entropy(logits, &targets)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Training(format!(
                    "masked-token loss became {lv} at step {step} (lr {}, batch {}x{})",
                    cfg.lr, batch.batch, batch.len
                )));
            }
            g.backward(loss)?;
            let grads = model.store.grads(&g, &p);
            crate::nn::clipped_step(&mut [&mut model.store], &mut [&mut adam], vec![grads], 1.0)?;
            if step % 50 == 0 {
                log::debug!("mlm step {step} loss {lv:.4}");
            }
            report.step_losses.push(lv);
            epoch.push(lv);
            step += 1;
        }
        if !epoch.is_empty() {
            report.epoch_means.push(epoch.iter().sum::<f32>() / epoch.len() as f32);
        }
    }
    report.initial_loss = report.step_losses.first().copied().unwrap_or(f32::NAN);
    report.final_loss = report.epoch_means.last().copied().unwrap_or(f32::NAN);
    model.final_mlm_loss = Some(report.final_loss);
    model.frozen = !cfg.trainable;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::corpus::{gen_synthetic_corpus, SyntheticSpec, Vocab};

    fn small_setup(n: usize) -> (Vec<Sentence>, Vocab) {
        let spec = SyntheticSpec {
            n_per_style: n,
            ..SyntheticSpec::default()
        };
        let c = gen_synthetic_corpus(5, &spec).unwrap().corpus;
        let v = Vocab::build(c.lines(), 1).unwrap();
        (c.sentences(&v, 64).unwrap(), v)
    }

    fn dims(mode: BackboneMode, vocab: usize) -> BackboneDims {
        BackboneDims {
            mode,
            layers: 1,
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            vocab,
            max_len: 66,
        }
    }

    #[test]
    fn output_shape_and_purity() {
        let (s, v) = small_setup(4);
        let m = BackboneModel::new(dims(BackboneMode::Mlm, v.len()), &mut rng_from_seed(1)).unwrap();
        let rows: Vec<&Sentence> = s.iter().take(3).collect();
        let b = Batch::from_sentences(&rows, vec![0, 1, 2]).unwrap();
        let f1 = m.encode_features(&b).unwrap();
        assert_eq!(f1.shape(), &[3, b.len, 16]);
        assert!(f1.is_finite());
        assert_eq!(f1, m.encode_features(&b).unwrap());
    }

    #[test]
    fn vocab_mismatch_is_a_usage_error() {
        let (s, v) = small_setup(2);
        let m = BackboneModel::new(dims(BackboneMode::Mlm, v.len() - 3), &mut rng_from_seed(1)).unwrap();
        let rows: Vec<&Sentence> = s.iter().collect();
        let b = Batch::from_sentences(&rows, (0..rows.len()).collect()).unwrap();
        assert!(matches!(m.encode_features(&b), Err(Error::Usage(_))));
    }

    #[test]
    fn identity_mode_is_embedding_plus_position() {
        let (s, v) = small_setup(2);
        let m = BackboneModel::new(dims(BackboneMode::Identity, v.len()), &mut rng_from_seed(1)).unwrap();
        let b = Batch::from_sentences(&[&s[0]], vec![0]).unwrap();
        let f = m.encode_features(&b).unwrap();
        let tok = &m.store.params()[0].value;
        let pos = &m.store.params()[1].value;
        for (j, &id) in s[0].tokens.iter().enumerate() {
            let want: Vec<f32> = tok.row(id).iter().zip(pos.row(j)).map(|(a, b)| a + b).collect();
            assert_eq!(&f.data()[j * 16..(j + 1) * 16], want.as_slice());
        }
    }

    #[test]
    fn feature_cache_matches_batched_encoding() {
        let (s, v) = small_setup(3);
        let m = BackboneModel::new(dims(BackboneMode::Mlm, v.len()), &mut rng_from_seed(2)).unwrap();
        let cache = m.feature_cache(&s).unwrap();
        let b = Batch::from_sentences(&[&s[1]], vec![1]).unwrap();
        assert_eq!(cache[1].data(), m.encode_features(&b).unwrap().data());
    }

    #[test]
    fn mlm_loss_decreases_and_is_deterministic() {
        let (s, v) = small_setup(100);
        let mut cfg = Config::synthetic().backbone;
        cfg.steps = 200;
        cfg.layers = 1;
        let d = dims(BackboneMode::Mlm, v.len());
        let (m, r) = pretrain_backbone_mlm(&s, d, &cfg, 3).unwrap();
        assert!(r.final_loss < r.initial_loss, "{r:?}");
        assert!(m.frozen);
        let (m2, _) = pretrain_backbone_mlm(&s, d, &cfg, 3).unwrap();
        assert_eq!(m.store.checksum(), m2.store.checksum());
    }
}
