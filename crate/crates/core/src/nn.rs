//! Parameter storage and the transformer building blocks shared by the
//! backbone, the VAE and the scorer.

use std::ops::Index;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{clip_global_norm, Adam, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named parameters of one model component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Graph handles for the parameters of one store, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Index<ParamId> for Binding {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Binding {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter in `g`; `trainable` selects gradient leaves
    /// versus constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Gradients for this store after `g.backward`, zero-filled where no
    /// gradient reached a parameter.
    pub fn grads(&self, g: &Graph, binding: &Binding) -> Vec<Vec<f32>> {
        self.params
            .iter()
            .zip(&binding.vars)
            .map(|(p, &v)| {
                g.grad(v)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.value.numel()])
            })
            .collect()
    }

    pub fn adam(&self, lr: f32) -> Adam {
        let sizes: Vec<usize> = self.params.iter().map(|p| p.value.numel()).collect();
        Adam::new(lr, &sizes)
    }

    pub fn apply(&mut self, adam: &mut Adam, grads: &[Vec<f32>]) -> Result<()> {
        let mut slices: Vec<&mut [f32]> = self
            .params
            .iter_mut()
            .map(|p| p.value.data_mut())
            .collect();
        let g: Vec<Option<&[f32]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
        adam.step(&mut slices, &g)
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Replaces values by name; every stored name must be present with an
    /// identical shape.
    pub fn load_from(&mut self, entries: &[Param]) -> Result<()> {
        for p in &mut self.params {
            let src = entries
                .iter()
                .find(|e| e.name == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{}'", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One optimizer step over several stores with a shared global-norm clip.
/// `grads[i]` belongs to `stores[i]`.
pub fn clipped_step(
    stores: &mut [&mut ParamStore],
    adams: &mut [&mut Adam],
    mut grads: Vec<Vec<Vec<f32>>>,
    max_norm: f32,
) -> Result<f32> {
    let norm = {
        let mut all: Vec<&mut [f32]> = grads
            .iter_mut()
            .flat_map(|gs| gs.iter_mut().map(|g| g.as_mut_slice()))
            .collect();
        clip_global_norm(&mut all, max_norm)
    };
    if !norm.is_finite() {
        return Err(Error::Training(format!("non-finite gradient norm {norm}")));
    }
    for ((store, adam), g) in stores.iter_mut().zip(adams.iter_mut()).zip(&grads) {
        store.apply(adam, g)?;
    }
    Ok(norm)
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let std = 1.0 / (d_in as f32).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(&[d_in, d_out], std, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        match self.b {
            Some(b) => g.add(y, p[b]),
            None => Ok(y),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

/// Additive attention mask `[B*H, T, T]`: `-1e9` on padded keys and, when
/// causal, on future positions.
pub fn attention_mask(pad: &[bool], batch: usize, len: usize, heads: usize, causal: bool) -> Tensor {
    const NEG: f32 = -1e9;
    let mut data = Vec::with_capacity(batch * heads * len * len);
    for b in 0..batch {
        let keys = &pad[b * len..(b + 1) * len];
        for _ in 0..heads {
            for q in 0..len {
                for (k, &is_pad) in keys.iter().enumerate() {
                    let blocked = is_pad || (causal && k > q);
                    data.push(if blocked { NEG } else { 0.0 });
                }
            }
        }
    }
    Tensor::from_parts(vec![batch * heads, len, len], data)
}

/// Sequence geometry of a flattened `[B*T, d]` activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    d_model: usize,
}

/// Outputs of one attention call. `q` and `k` are `[B*H, T, d_head]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub q: Var,
    pub k: Var,
    pub probs: Var,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), d_model, d_model, true, rng),
            wk: Linear::new(store, &format!("{name}.k"), d_model, d_model, true, rng),
            wv: Linear::new(store, &format!("{name}.v"), d_model, d_model, true, rng),
            wo: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, rng),
            heads,
            d_model,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split_heads(&self, g: &mut Graph, x: Var, s: SeqShape) -> Result<Var> {
        let dh = self.d_model / self.heads;
        let x = g.reshape(x, &[s.batch, s.len, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[s.batch * self.heads, s.len, dh])
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var, s: SeqShape, mask: Var) -> Result<AttentionOutput> {
        let dh = self.d_model / self.heads;
        let q = self.wq.forward(g, p, x)?;
        let k = self.wk.forward(g, p, x)?;
        let v = self.wv.forward(g, p, x)?;
        let q = self.split_heads(g, q, s)?;
        let k = self.split_heads(g, k, s)?;
        let v = self.split_heads(g, v, s)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
        let scores = g.add(scores, mask)?;
        let probs = g.softmax(scores, 2)?;
        let ctx = g.batch_matmul(probs, v, false)?;
        let ctx = g.reshape(ctx, &[s.batch, self.heads, s.len, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[s.batch * s.len, self.d_model])?;
        let out = self.wo.forward(g, p, ctx)?;
        Ok(AttentionOutput { out, q, k, probs })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, true, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dims: BlockDims, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dims.d_model),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dims.d_model, dims.heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dims.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dims.d_model, dims.d_ff, rng),
        })
    }

    pub fn heads(&self) -> usize {
        self.attn.heads()
    }

    /// Returns the block output and the attention internals.
    pub fn forward_full(&self, g: &mut Graph, p: &Binding, x: Var, s: SeqShape, mask: Var) -> Result<(Var, AttentionOutput)> {
        let h = self.ln1.forward(g, p, x)?;
        let att = self.attn.forward(g, p, h, s, mask)?;
        let x = g.add(x, att.out)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.ffn.forward(g, p, h)?;
        Ok((g.add(x, h)?, att))
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var, s: SeqShape, mask: Var) -> Result<Var> {
        Ok(self.forward_full(g, p, x, s, mask)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
}

/// A stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
}

impl TransformerStack {
    pub fn new(store: &mut ParamStore, name: &str, layers: usize, dims: BlockDims, rng: &mut Rng) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(store, &format!("{name}.{i}"), dims, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), dims.d_model),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, mut x: Var, s: SeqShape, mask: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, p, x, s, mask)?;
        }
        self.ln_f.forward(g, p, x)
    }
}

/// Learned token and position tables.
#[derive(Clone, Debug)]
pub struct Embeddings {
    tokens: ParamId,
    positions: ParamId,
    vocab: usize,
    max_len: usize,
}

impl Embeddings {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, max_len: usize, d: usize, rng: &mut Rng) -> Self {
        Self {
            tokens: store.add(format!("{name}.tok"), Tensor::randn(&[vocab, d], 0.5, rng)),
            positions: store.add(format!("{name}.pos"), Tensor::randn(&[max_len, d], 0.1, rng)),
            vocab,
            max_len,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Embeds a padded `[B, T]` id matrix (row-major) into `[B*T, d]`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, ids: &[usize], s: SeqShape) -> Result<Var> {
        if s.len > self.max_len {
            return Err(Error::usage(format!(
                "sequence length {} exceeds position table of {}",
                s.len, self.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::usage(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        let tok = g.embedding(p[self.tokens], ids)?;
        let pos_ids: Vec<usize> = (0..s.batch).flat_map(|_| 0..s.len).collect();
        let pos = g.embedding(p[self.positions], &pos_ids)?;
        g.add(tok, pos)
    }
}
