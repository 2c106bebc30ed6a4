//! Two-stage training: joint VAE + style-table training, then fine-tuning
//! the VAE to rebuild sentences whose pivot words were masked.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backbone::{assemble_features, BackboneModel};
use crate::config::Config;
use crate::corpus::{batch_by_tokens, Batch, Sentence};
use crate::error::{Error, Result};
use crate::nn::{clipped_step, Binding};
use crate::persist::Checkpoint;
use crate::rng::{derive_seed, rng_from_seed, Rng, Stream};
use crate::scorer::{mask_sentence, MaskPlan, ScorerModel};
use crate::tensor::{Graph, Tensor, Var};
use crate::vae::{combine_losses, style_loss, LossWeights, StyleEmbeddingTable, VaeModel};

/// Everything the transfer pipeline needs.
#[derive(Clone, Debug)]
pub struct Models {
    pub backbone: BackboneModel,
    pub vae: VaeModel,
    pub style: StyleEmbeddingTable,
}

impl Models {
    pub fn checkpoint(&self, config: &Config, vocab: &[String], seed: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(config.to_json(), Some(vocab.to_vec()), seed);
        ck.put(self.backbone.component());
        ck.put(self.vae.component());
        ck.put(self.style.component());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        use crate::persist::ComponentTag as T;
        Ok(Self {
            backbone: BackboneModel::from_component(ck.require(T::Backbone)?)?,
            vae: VaeModel::from_component(ck.require(T::Vae)?)?,
            style: StyleEmbeddingTable::from_component(ck.require(T::StyleTable)?)?,
        })
    }

    /// Encoder features for `batch`: cached when the backbone is frozen,
    /// otherwise computed in-graph so the backbone receives gradients.
    fn features(&self, g: &mut Graph, pb: &Binding, batch: &Batch, cache: Option<&[Tensor]>) -> Result<Var> {
        match cache {
            Some(c) => Ok(g.constant(assemble_features(c, batch)?)),
            None => self.backbone.forward(g, pb, &batch.ids, &batch.pad, batch.shape()),
        }
    }
}

/// One JSON line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub nll: f32,
    pub kl: f32,
    pub style: f32,
    pub total: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepLog>,
    pub epoch_means: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochPlanStats {
    pub selected: usize,
    pub masked_tokens: usize,
    pub sentences: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2History {
    pub train: TrainHistory,
    pub held_out_losses: Vec<f32>,
    pub plans: Vec<EpochPlanStats>,
    pub best_epoch: usize,
}

/// Sinks for step logs and periodic checkpoints.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint: Option<&'a mut dyn FnMut(&Models, usize) -> Result<()>>,
}

impl TrainHooks<'_> {
    fn record(&mut self, entry: &StepLog) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            let line = serde_json::to_string(entry)?;
            writeln!(w, "{line}").map_err(|e| Error::Training(format!("writing training log: {e}")))?;
        }
        Ok(())
    }

    fn save(&mut self, models: &Models, step: usize) -> Result<()> {
        match self.checkpoint.as_mut() {
            Some(f) => f(models, step),
            None => Ok(()),
        }
    }
}

struct VaeTerms {
    z: Var,
    nll: Var,
    /// Summed KL divided by the number of predicted tokens.
    kl: Var,
}

/// Reconstruction and KL terms for encoder input `enc` and decoder targets
/// from `dec` (same rows, same padding). `eps = None` uses `z = μ`.
fn vae_terms(
    g: &mut Graph,
    models: &Models,
    pv: &Binding,
    ps: &Binding,
    feats: Var,
    dec: &Batch,
    eps: Option<Tensor>,
    free_bits: f32,
) -> Result<VaeTerms> {
    let s = dec.shape();
    let (mu, log_var) = models.vae.encode(g, pv, feats, &dec.pad, s)?;
    let z = match eps {
        Some(e) => models.vae.sample(g, mu, log_var, e)?,
        None => mu,
    };
    let sx = models.style.lookup(g, ps, &dec.styles)?;
    let sx = g.stop_gradient(sx);
    let cond = g.add(z, sx)?;
    let (inp, targets, ds) = dec.decoder_io();
    let nll = models.vae.reconstruction_nll(g, pv, &inp, &targets, ds, cond)?;
    let n_targets = targets.iter().filter(|t| t.is_some()).count();
    let kl = models.vae.kl_free_bits(g, mu, log_var, free_bits)?;
    let kl = g.scale(kl, 1.0 / n_targets as f32);
    Ok(VaeTerms { z, nll, kl })
}

/// Graph nodes of one stage-I objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Loss {
    pub nll: Var,
    pub kl: Var,
    pub style: Var,
    pub total: Var,
}

/// Builds the stage-I objective for one batch. `feats` are the backbone
/// features of `batch` and `eps` the reparameterization noise `[B, d]`.
#[allow(clippy::too_many_arguments)]
pub fn stage1_loss(
    g: &mut Graph,
    models: &Models,
    pv: &Binding,
    ps: &Binding,
    feats: Var,
    batch: &Batch,
    eps: Tensor,
    weights: LossWeights,
    free_bits: f32,
    full_bce: bool,
) -> Result<Stage1Loss> {
    let terms = vae_terms(g, models, pv, ps, feats, batch, Some(eps), free_bits)?;
    let z_sg = g.stop_gradient(terms.z);
    let style = style_loss(g, &models.style, ps, z_sg, &batch.styles, full_bce)?;
    let total = combine_losses(g, terms.nll, terms.kl, Some(style), weights)?;
    Ok(Stage1Loss {
        nll: terms.nll,
        kl: terms.kl,
        style,
        total,
    })
}

/// Backbone features for `batch`, in-graph (bound with `pb`).
pub fn batch_features(models: &Models, g: &mut Graph, pb: &Binding, batch: &Batch) -> Result<Var> {
    models.features(g, pb, batch, None)
}

fn gaussian(rows: usize, d: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(&[rows, d], 1.0, rng)
}

fn check_finite(v: f32, step: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("{what} loss became {v} at step {step}; parameters left at the last good step")))
    }
}

fn mean(xs: &[f32]) -> f32 {
    xs.iter().sum::<f32>() / xs.len().max(1) as f32
}

fn frozen_cache(models: &Models, sentences: &[Sentence]) -> Result<Option<Vec<Tensor>>> {
    if models.backbone.frozen {
        Ok(Some(models.backbone.feature_cache(sentences)?))
    } else {
        Ok(None)
    }
}

/// Stage I: the VAE reconstructs its input conditioned on `z + sg(s_x)`
/// while the style table aligns with `sg(z)`.
pub fn train_stage1(models: &mut Models, train: &[Sentence], cfg: &Config, seed: u64, hooks: &mut TrainHooks) -> Result<TrainHistory> {
    let t = &cfg.train;
    if train.is_empty() {
        return Err(Error::data("stage I needs training sentences"));
    }
    let cache = frozen_cache(models, train)?;
    let mut rng = rng_from_seed(derive_seed(seed, Stream::Stage1));
    let mut adam_v = models.vae.store.adam(t.lr);
    let mut adam_s = models.style.store.adam(t.lr);
    let mut adam_b = models.backbone.store.adam(t.lr);
    let warmup = (t.kl_warmup_fraction * t.stage1_steps as f32).max(1.0);
    let mut history = TrainHistory::default();
    let mut step = 0;
    while step < t.stage1_steps {
        let mut epoch = Vec::new();
        for batch in batch_by_tokens(train, t.token_budget, &mut rng)? {
            if step >= t.stage1_steps {
                break;
            }
            let beta = t.beta * (step as f32 / warmup).min(1.0);
            let weights = LossWeights {
                lambda_vae: t.lambda_vae,
                lambda_style: t.lambda_style,
                beta,
            };
            let mut g = Graph::new();
            let pv = models.vae.store.bind(&mut g, true);
            let ps = models.style.store.bind(&mut g, true);
            let pb = models.backbone.store.bind(&mut g, !models.backbone.frozen);
            let feats = models.features(&mut g, &pb, &batch, cache.as_deref())?;
            let eps = gaussian(batch.batch, models.vae.dims.d_latent, &mut rng);
            let l = stage1_loss(&mut g, models, &pv, &ps, feats, &batch, eps, weights, t.free_bits, cfg.style.full_bce)?;
            let total = l.total;
            let entry = StepLog {
                step,
                nll: g.value(l.nll).item(),
                kl: g.value(l.kl).item(),
                style: g.value(l.style).item(),
                total: g.value(total).item(),
            };
            if let Err(e) = check_finite(entry.total, step, "stage I") {
                hooks.save(models, step)?;
                return Err(e);
            }
            g.backward(total)?;
            let gv = models.vae.store.grads(&g, &pv);
            let gs = models.style.store.grads(&g, &ps);
            let res = if models.backbone.frozen {
                clipped_step(
                    &mut [&mut models.vae.store, &mut models.style.store],
                    &mut [&mut adam_v, &mut adam_s],
                    vec![gv, gs],
                    t.clip_norm,
                )
            } else {
                let gb = models.backbone.store.grads(&g, &pb);
                clipped_step(
                    &mut [&mut models.vae.store, &mut models.style.store, &mut models.backbone.store],
                    &mut [&mut adam_v, &mut adam_s, &mut adam_b],
                    vec![gv, gs, gb],
                    t.clip_norm,
                )
            };
            if let Err(e) = res {
                hooks.save(models, step)?;
                return Err(e);
            }
            hooks.record(&entry)?;
            if step % 100 == 0 {
                log::info!(
                    "stage1 step {step} nll {:.4} kl {:.4} style {:.4} total {:.4}",
                    entry.nll,
                    entry.kl,
                    entry.style,
                    entry.total
                );
            }
            epoch.push(entry.total);
            history.steps.push(entry);
            step += 1;
            if t.checkpoint_every > 0 && step % t.checkpoint_every == 0 {
                hooks.save(models, step)?;
            }
        }
        if !epoch.is_empty() {
            history.epoch_means.push(mean(&epoch));
        }
    }
    Ok(history)
}

/// Importance scores for every sentence from the frozen scorer.
pub fn sentence_scores(backbone: &BackboneModel, scorer: &ScorerModel, sentences: &[Sentence]) -> Result<Vec<Vec<f32>>> {
    let cache = backbone.feature_cache(sentences)?;
    sentences
        .iter()
        .zip(&cache)
        .map(|(s, f)| scorer.importance_scores(f, s))
        .collect()
}

/// Masks every sentence independently; returns the encoder inputs and plans.
pub fn mask_corpus(sentences: &[Sentence], scores: &[Vec<f32>], fraction: f64, rng: &mut Rng) -> Result<(Vec<Sentence>, Vec<MaskPlan>)> {
    let mut out = Vec::with_capacity(sentences.len());
    let mut plans = Vec::with_capacity(sentences.len());
    for (s, a) in sentences.iter().zip(scores) {
        let (m, p) = mask_sentence(s, a, fraction, rng)?;
        out.push(m);
        plans.push(p);
    }
    Ok((out, plans))
}

/// Mean per-batch VAE loss (`nll + β kl` at `z = μ`) of reconstructing
/// `targets` from encoder inputs `inputs` (row-aligned).
pub fn reconstruction_loss(models: &Models, inputs: &[Sentence], targets: &[Sentence], beta: f32) -> Result<f32> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::usage("inputs and targets must be nonempty and aligned"));
    }
    let cache = models.backbone.feature_cache(inputs)?;
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (c, chunk) in targets.chunks(64).enumerate() {
        let idx: Vec<usize> = (0..chunk.len()).map(|i| c * 64 + i).collect();
        let rows: Vec<&Sentence> = chunk.iter().collect();
        let dec = Batch::from_sentences(&rows, idx)?;
        let mut g = Graph::new();
        let pv = models.vae.store.bind(&mut g, false);
        let ps = models.style.store.bind(&mut g, false);
        let feats = g.constant(assemble_features(&cache, &dec)?);
        let terms = vae_terms(&mut g, models, &pv, &ps, feats, &dec, None, 0.0)?;
        let loss = combine_losses(&mut g, terms.nll, terms.kl, None, LossWeights { beta, ..LossWeights::default() })?;
        total += g.value(loss).item() as f64 * chunk.len() as f64;
        n += chunk.len();
    }
    Ok((total / n as f64) as f32)
}

/// Stage II: the style table is frozen; each epoch a fresh share of the
/// sentences has its pivot words masked, and the VAE reconstructs the
/// original sentences from the masked inputs.
pub fn train_stage2(
    models: &mut Models,
    scorer: Option<&ScorerModel>,
    train: &[Sentence],
    held_out: &[Sentence],
    cfg: &Config,
    seed: u64,
    hooks: &mut TrainHooks,
) -> Result<Stage2History> {
    let scorer = scorer.ok_or_else(|| Error::usage("stage II needs a trained scorer"))?;
    let t = &cfg.train;
    if train.is_empty() {
        return Err(Error::data("stage II needs training sentences"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, Stream::Stage2));
    let scores = sentence_scores(&models.backbone, scorer, train)?;
    let held = if held_out.is_empty() {
        None
    } else {
        let hs = sentence_scores(&models.backbone, scorer, held_out)?;
        let mut hrng = rng_from_seed(derive_seed(seed, Stream::Stage2) ^ 0x5eed);
        let (masked, _) = mask_corpus(held_out, &hs, t.stage2_mask_fraction, &mut hrng)?;
        Some(masked)
    };
    let lr = t.lr * t.stage2_lr_factor;
    let mut adam_v = models.vae.store.adam(lr);
    let mut adam_b = models.backbone.store.adam(lr);
    let weights = LossWeights {
        lambda_vae: t.lambda_vae,
        lambda_style: 0.0,
        beta: t.beta,
    };
    let mut history = Stage2History::default();
    let mut best: Option<(f32, Models)> = None;
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 0..t.stage2_epochs {
        let (masked, plans) = mask_corpus(train, &scores, t.stage2_mask_fraction, &mut rng)?;
        history.plans.push(EpochPlanStats {
            selected: plans.iter().filter(|p| p.selected).count(),
            masked_tokens: plans.iter().map(MaskPlan::n_masked).sum(),
            sentences: plans.len(),
        });
        let cache = frozen_cache(models, &masked)?;
        let mut losses = Vec::new();
        for dec in batch_by_tokens(train, t.token_budget, &mut rng)? {
            let rows: Vec<&Sentence> = dec.indices.iter().map(|&i| &masked[i]).collect();
            let enc = Batch::from_sentences(&rows, dec.indices.clone())?;
            let mut g = Graph::new();
            let pv = models.vae.store.bind(&mut g, true);
            let ps = models.style.store.bind(&mut g, false);
            let pb = models.backbone.store.bind(&mut g, !models.backbone.frozen);
            let feats = models.features(&mut g, &pb, &enc, cache.as_deref())?;
            let eps = gaussian(dec.batch, models.vae.dims.d_latent, &mut rng);
            let terms = vae_terms(&mut g, models, &pv, &ps, feats, &dec, Some(eps), t.free_bits)?;
            let total = combine_losses(&mut g, terms.nll, terms.kl, None, weights)?;
            let entry = StepLog {
                step,
                nll: g.value(terms.nll).item(),
                kl: g.value(terms.kl).item(),
                style: 0.0,
                total: g.value(total).item(),
            };
            if let Err(e) = check_finite(entry.total, step, "stage II") {
                hooks.save(models, step)?;
                return Err(e);
            }
            g.backward(total)?;
            let gv = models.vae.store.grads(&g, &pv);
            let res = if models.backbone.frozen {
                clipped_step(&mut [&mut models.vae.store], &mut [&mut adam_v], vec![gv], t.clip_norm)
            } else {
                let gb = models.backbone.store.grads(&g, &pb);
                clipped_step(
                    &mut [&mut models.vae.store, &mut models.backbone.store],
                    &mut [&mut adam_v, &mut adam_b],
                    vec![gv, gb],
                    t.clip_norm,
                )
            };
            if let Err(e) = res {
                hooks.save(models, step)?;
                return Err(e);
            }
            hooks.record(&entry)?;
            losses.push(entry.total);
            history.train.steps.push(entry);
            step += 1;
            if t.checkpoint_every > 0 && step % t.checkpoint_every == 0 {
                hooks.save(models, step)?;
            }
        }
        history.train.epoch_means.push(mean(&losses));
        if let Some(h) = &held {
            let l = reconstruction_loss(models, h, held_out, t.beta)?;
            log::info!("stage2 epoch {epoch} train {:.4} held-out {l:.4}", mean(&losses));
            history.held_out_losses.push(l);
            if best.as_ref().is_none_or(|(b, _)| l < *b) {
                best = Some((l, models.clone()));
                history.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= t.patience {
                    log::info!("stage2 early stop after epoch {epoch}");
                    break;
                }
            }
        } else {
            history.best_epoch = epoch;
        }
    }
    if let Some((_, m)) = best {
        *models = m;
    }
    Ok(history)
}
