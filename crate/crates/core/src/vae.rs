//! Transformer VAE with an external style-embedding table.
//!
//! The encoder reads backbone features; the posterior mean and log-variance
//! come from one-block heads read at the first token. The decoder is causal
//! and receives its conditioning vector added to every input embedding.

use serde::{Deserialize, Serialize};

use crate::config::{StyleConfig, VaeConfig};
use crate::corpus::{StyleId, BOS, EOS, MASK, PAD};
use crate::error::{Error, Result};
use crate::nn::{attention_mask, Binding, BlockDims, Embeddings, Linear, ParamId, ParamStore, SeqShape, TransformerStack};
use crate::persist::{Component, ComponentTag};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeDims {
    pub d_in: usize,
    pub d_model: usize,
    pub d_latent: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl VaeDims {
    pub fn from_config(c: &VaeConfig, d_in: usize, vocab: usize, max_content_len: usize) -> Self {
        Self {
            d_in,
            d_model: c.d_model,
            d_latent: c.d_latent,
            layers: c.layers,
            heads: c.heads,
            ffn_dim: c.ffn_dim,
            vocab,
            max_len: max_content_len + 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
}

pub type LatentVector = Vec<f32>;

/// `z = μ + exp(½ log_var) ⊙ ε`.
pub fn sample_latent(dist: &LatentDistribution, eps: &[f32]) -> Result<LatentVector> {
    if eps.len() != dist.mu.len() || dist.log_var.len() != dist.mu.len() {
        return Err(Error::usage("latent dimension mismatch"));
    }
    Ok(dist
        .mu
        .iter()
        .zip(&dist.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// KL divergence to the standard normal: `½ Σ (μ² + σ² − 1 − log σ²)`.
pub fn kl_term(dist: &LatentDistribution) -> f64 {
    dist.mu
        .iter()
        .zip(&dist.log_var)
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum()
}

/// `−log σ(c)` for a cosine `c`.
pub fn style_loss_from_cosine(c: f64) -> f64 {
    (1.0 + (-c).exp()).ln()
}

/// Loss terms of one batch and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f32,
    pub kl: f32,
    pub style: f32,
    pub total: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_vae: f32,
    pub lambda_style: f32,
    pub beta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_vae: 1.0,
            lambda_style: 1.0,
            beta: 1.0,
        }
    }
}

/// `λ_vae (nll + β kl) + λ_style style`.
pub fn stage1_total_loss(nll: f32, kl: f32, style: f32, w: LossWeights) -> LossBreakdown {
    LossBreakdown {
        nll,
        kl,
        style,
        total: w.lambda_vae * (nll + w.beta * kl) + w.lambda_style * style,
    }
}

/// Graph form of [`stage1_total_loss`].
pub fn combine_losses(g: &mut Graph, nll: Var, kl: Var, style: Option<Var>, w: LossWeights) -> Result<Var> {
    let kl = g.scale(kl, w.beta);
    let vae = g.add(nll, kl)?;
    let mut total = g.scale(vae, w.lambda_vae);
    if let Some(s) = style {
        let s = g.scale(s, w.lambda_style);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Rows `s_1..s_k`, produced by a bias-free linear map from one-hot ids.
#[derive(Clone, Debug)]
pub struct StyleEmbeddingTable {
    pub store: ParamStore,
    table: ParamId,
    pub k: usize,
    pub d: usize,
}

impl StyleEmbeddingTable {
    /// Rows are drawn so their expected L2 norm is about `init_scale`.
    pub fn new(k: usize, d: usize, init_scale: f32, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let table = store.add("style.table", Tensor::randn(&[k, d], init_scale / (d as f32).sqrt(), rng));
        Self { store, table, k, d }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let k = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if k == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::usage("style rows must be nonempty and of equal width"));
        }
        let mut store = ParamStore::new();
        let table = store.add("style.table", Tensor::new(vec![k, d], rows.concat())?);
        Ok(Self { store, table, k, d })
    }

    pub fn row(&self, style: StyleId) -> Result<&[f32]> {
        if style >= self.k {
            return Err(Error::usage(format!("style id {style} out of range (k = {})", self.k)));
        }
        Ok(self.store.get(self.table).row(style))
    }

    pub fn var(&self, p: &Binding) -> Var {
        p[self.table]
    }

    /// One-hot lookup: `[B, d]` rows for `styles`.
    pub fn lookup(&self, g: &mut Graph, p: &Binding, styles: &[StyleId]) -> Result<Var> {
        if let Some(&s) = styles.iter().find(|&&s| s >= self.k) {
            return Err(Error::usage(format!("style id {s} out of range (k = {})", self.k)));
        }
        g.embedding(p[self.table], styles)
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn component(&self) -> Component {
        Component::from_store(ComponentTag::StyleTable, &self.store, serde_json::json!({"k": self.k, "d": self.d}))
    }

    pub fn from_component(c: &Component) -> Result<Self> {
        let p = c
            .params
            .first()
            .ok_or_else(|| Error::Checkpoint("empty style_table component".into()))?;
        let sh = p.value.shape();
        if sh.len() != 2 {
            return Err(Error::Checkpoint(format!("style table has shape {sh:?}")));
        }
        let rows: Vec<Vec<f32>> = (0..sh[0]).map(|i| p.value.row(i).to_vec()).collect();
        Self::from_rows(&rows)
    }
}

/// Style loss on `[B, d]` latents that must already be detached.
/// Exact mode: `mean_b −log σ(cos(s_true, z))`; `full_bce` adds
/// `−log(1 − σ(cos(s_j, z)))` for every other style `j`.
pub fn style_loss(
    g: &mut Graph,
    table: &StyleEmbeddingTable,
    p: &Binding,
    z_detached: Var,
    styles: &[StyleId],
    full_bce: bool,
) -> Result<Var> {
    let s_true = table.lookup(g, p, styles)?;
    let cos = g.row_cosine(s_true, z_detached)?;
    let ls = g.log_sigmoid(cos);
    let mut loss = g.mean(ls);
    loss = g.scale(loss, -1.0);
    if full_bce {
        for off in 1..table.k {
            let others: Vec<StyleId> = styles.iter().map(|&s| (s + off) % table.k).collect();
            let s_o = table.lookup(g, p, &others)?;
            let cos = g.row_cosine(s_o, z_detached)?;
            let neg = g.scale(cos, -1.0);
            let ls = g.log_sigmoid(neg);
            let m = g.mean(ls);
            let m = g.scale(m, -1.0);
            loss = g.add(loss, m)?;
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub dims: VaeDims,
    pub store: ParamStore,
    in_proj: Linear,
    encoder: TransformerStack,
    mu_head: TransformerStack,
    mu_out: Linear,
    var_head: TransformerStack,
    var_out: Linear,
    dec_emb: Embeddings,
    cond_proj: Linear,
    decoder: TransformerStack,
    out_proj: Linear,
}

impl VaeModel {
    pub fn new(dims: VaeDims, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let s = &mut store;
        let block = BlockDims {
            d_model: dims.d_model,
            heads: dims.heads,
            d_ff: dims.ffn_dim,
        };
        let in_proj = Linear::new(s, "vae.in", dims.d_in, dims.d_model, true, rng);
        let encoder = TransformerStack::new(s, "vae.enc", dims.layers, block, rng)?;
        let mu_head = TransformerStack::new(s, "vae.mu", 1, block, rng)?;
        let mu_out = Linear::new(s, "vae.mu.out", dims.d_model, dims.d_latent, true, rng);
        let var_head = TransformerStack::new(s, "vae.var", 1, block, rng)?;
        let var_out = Linear::new(s, "vae.var.out", dims.d_model, dims.d_latent, true, rng);
        let dec_emb = Embeddings::new(s, "vae.dec.emb", dims.vocab, dims.max_len, dims.d_model, rng);
        let cond_proj = Linear::new(s, "vae.cond", dims.d_latent, dims.d_model, false, rng);
        let decoder = TransformerStack::new(s, "vae.dec", dims.layers, block, rng)?;
        let out_proj = Linear::new(s, "vae.out", dims.d_model, dims.vocab, true, rng);
        Ok(Self {
            dims,
            store,
            in_proj,
            encoder,
            mu_head,
            mu_out,
            var_head,
            var_out,
            dec_emb,
            cond_proj,
            decoder,
            out_proj,
        })
    }

    /// Posterior parameters `([B, d_latent], [B, d_latent])` from flattened
    /// features `[B*T, d_in]`. `pad` is true on padding.
    pub fn encode(&self, g: &mut Graph, p: &Binding, feats: Var, pad: &[bool], s: SeqShape) -> Result<(Var, Var)> {
        if pad.len() != s.batch * s.len {
            return Err(Error::usage("pad mask does not match the batch shape"));
        }
        if (0..s.batch).any(|b| pad[b * s.len..(b + 1) * s.len].iter().all(|&x| x)) {
            return Err(Error::usage("cannot encode an all-padding sequence"));
        }
        let mask = g.constant(attention_mask(pad, s.batch, s.len, self.dims.heads, false));
        let h = self.in_proj.forward(g, p, feats)?;
        let h = self.encoder.forward(g, p, h, s, mask)?;
        let first: Vec<usize> = (0..s.batch).map(|b| b * s.len).collect();
        let hm = self.mu_head.forward(g, p, h, s, mask)?;
        let hm = g.gather_rows(hm, &first)?;
        let mu = self.mu_out.forward(g, p, hm)?;
        let hv = self.var_head.forward(g, p, h, s, mask)?;
        let hv = g.gather_rows(hv, &first)?;
        let log_var = self.var_out.forward(g, p, hv)?;
        Ok((mu, log_var))
    }

    /// Reparameterized sample; `eps` has the shape of `mu`.
    pub fn sample(&self, g: &mut Graph, mu: Var, log_var: Var, eps: Tensor) -> Result<Var> {
        let half = g.scale(log_var, 0.5);
        let std = g.exp(half);
        let eps = g.constant(eps);
        let noise = g.mul(std, eps)?;
        g.add(mu, noise)
    }

    /// Summed KL over every row of the batch.
    pub fn kl(&self, g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
        let mu2 = g.mul(mu, mu)?;
        let var = g.exp(log_var);
        let a = g.add(mu2, var)?;
        let a = g.sub(a, log_var)?;
        let a = g.add_scalar(a, -1.0);
        let s = g.sum(a);
        Ok(g.scale(s, 0.5))
    }

    /// Batch-summed KL where each latent dimension is charged at least
    /// `free_bits` nats per row. Dimensions under the floor get no gradient.
    pub fn kl_free_bits(&self, g: &mut Graph, mu: Var, log_var: Var, free_bits: f32) -> Result<Var> {
        if free_bits <= 0.0 {
            return self.kl(g, mu, log_var);
        }
        let mu2 = g.mul(mu, mu)?;
        let var = g.exp(log_var);
        let a = g.add(mu2, var)?;
        let a = g.sub(a, log_var)?;
        let a = g.add_scalar(a, -1.0);
        let a = g.scale(a, 0.5);
        let (rows, d) = (g.shape(a)[0], g.shape(a)[1]);
        let ones = g.constant(Tensor::full(&[1, rows], 1.0));
        let per_dim = g.matmul(ones, a)?;
        let floor = free_bits * rows as f32;
        let keep: Vec<f32> = g.value(per_dim).data().iter().map(|&x| if x >= floor { 1.0 } else { 0.0 }).collect();
        let fill: Vec<f32> = keep.iter().map(|&k| (1.0 - k) * floor).collect();
        let keep = g.constant(Tensor::new(vec![1, d], keep)?);
        let fill = g.constant(Tensor::new(vec![1, d], fill)?);
        let kept = g.mul(per_dim, keep)?;
        let kl = g.add(kept, fill)?;
        Ok(g.sum(kl))
    }

    /// Next-token logits `[B*T, V]` for decoder inputs `ids` with one
    /// conditioning row per sequence (`cond` is `[B, d_latent]`).
    pub fn decode_logits(&self, g: &mut Graph, p: &Binding, ids: &[usize], pad: &[bool], s: SeqShape, cond: Var) -> Result<Var> {
        let x = self.dec_emb.forward(g, p, ids, s)?;
        let c = self.cond_proj.forward(g, p, cond)?;
        let c = g.expand_rows(c, s.len)?;
        let x = g.add(x, c)?;
        let mask = g.constant(attention_mask(pad, s.batch, s.len, self.dims.heads, true));
        let h = self.decoder.forward(g, p, x, s, mask)?;
        self.out_proj.forward(g, p, h)
    }

    /// Token-mean teacher-forced NLL.
    pub fn reconstruction_nll(
        &self,
        g: &mut Graph,
        p: &Binding,
        dec_in: &[usize],
        targets: &[Option<usize>],
        s: SeqShape,
        cond: Var,
    ) -> Result<Var> {
        if dec_in.len() != targets.len() || dec_in.len() != s.batch * s.len {
            return Err(Error::usage(format!(
                "decoder input ({}) and targets ({}) lengths differ",
                dec_in.len(),
                targets.len()
            )));
        }
        let pad: Vec<bool> = targets.iter().map(Option::is_none).collect();
        let logits = self.decode_logits(g, p, dec_in, &pad, s, cond)?;
        g.cross_entropy(logits, targets)
    }

    /// Deterministic posterior parameters for a batch of feature rows.
    pub fn encode_latent(&self, feats: &Tensor, pad: &[bool], s: SeqShape) -> Result<Vec<LatentDistribution>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let f = g.constant(feats.clone().reshape(&[s.batch * s.len, self.dims.d_in])?);
        let (mu, lv) = self.encode(&mut g, &p, f, pad, s)?;
        let (mu, lv) = (g.value(mu), g.value(lv));
        Ok((0..s.batch)
            .map(|b| LatentDistribution {
                mu: mu.row(b).to_vec(),
                log_var: lv.row(b).to_vec(),
            })
            .collect())
    }

    /// Greedy decoding of every conditioning row; each output stops at
    /// `</s>` (excluded) or after `max_len` tokens.
    pub fn decode_greedy_batch(&self, cond: &[LatentVector], max_len: usize) -> Result<Vec<Vec<usize>>> {
        let b = cond.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let d = self.dims.d_latent;
        if cond.iter().any(|c| c.len() != d) {
            return Err(Error::usage("conditioning width differs from the latent size"));
        }
        let steps = max_len.min(self.dims.max_len - 1);
        let cond_t = Tensor::new(vec![b, d], cond.concat())?;
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; b];
        let mut done = vec![false; b];
        for t in 1..=steps {
            let mut g = Graph::new();
            let p = self.store.bind(&mut g, false);
            let c = g.constant(cond_t.clone());
            let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
            let pad = vec![false; b * t];
            let logits = self.decode_logits(&mut g, &p, &ids, &pad, SeqShape { batch: b, len: t }, c)?;
            let lv = g.value(logits);
            for (r, seq) in seqs.iter_mut().enumerate() {
                let next = if done[r] { EOS } else { next_token(lv.row(r * t + t - 1)) };
                if next == EOS {
                    done[r] = true;
                }
                seq.push(next);
            }
            if done.iter().all(|&x| x) {
                break;
            }
        }
        Ok(seqs
            .into_iter()
            .map(|s| s[1..].iter().copied().take_while(|&t| t != EOS).collect())
            .collect())
    }

    pub fn decode_greedy(&self, cond: &LatentVector, max_len: usize) -> Result<Vec<usize>> {
        Ok(self.decode_greedy_batch(std::slice::from_ref(cond), max_len)?.remove(0))
    }

    pub fn component(&self) -> Component {
        Component::from_store(ComponentTag::Vae, &self.store, serde_json::json!({"dims": self.dims}))
    }

    pub fn from_component(c: &Component) -> Result<Self> {
        let dims: VaeDims = serde_json::from_value(c.meta["dims"].clone())
            .map_err(|e| Error::Checkpoint(format!("vae dims: {e}")))?;
        let mut m = Self::new(dims, &mut rng_from_seed(0))?;
        m.store.load_from(&c.params)?;
        Ok(m)
    }
}

/// Argmax over tokens the decoder may emit (never `<pad>`, `<s>` or `<mask>`).
fn next_token(row: &[f32]) -> usize {
    let mut best = EOS;
    for (i, &x) in row.iter().enumerate() {
        if !matches!(i, PAD | BOS | MASK) && x > row[best] {
            best = i;
        }
    }
    best
}

pub fn new_style_table(k: usize, d: usize, cfg: &StyleConfig, rng: &mut Rng) -> StyleEmbeddingTable {
    StyleEmbeddingTable::new(k, d, cfg.init_scale, rng)
}
