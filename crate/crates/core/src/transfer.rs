//! Inference by latent arithmetic: `z' = z + w (s_t − s_o)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::assemble_features;
use crate::corpus::{detokenize, Batch, Sentence, StyleId, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{bleu_single, transfer_accuracy, CharLm, EvalClassifier, EvalReport};
use crate::rng::Rng;
use crate::trainer::Models;
use crate::vae::{sample_latent, LatentVector, StyleEmbeddingTable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub from: StyleId,
    pub to: StyleId,
    pub weight: f32,
    pub max_len: usize,
}

impl TransferRequest {
    fn validate(&self, k: usize) -> Result<()> {
        if self.from >= k || self.to >= k {
            return Err(Error::usage(format!(
                "style ids {} -> {} out of range (k = {k})",
                self.from, self.to
            )));
        }
        if self.from == self.to {
            return Err(Error::usage("source and target style are the same"));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::usage(format!("style weight must be >= 0, got {}", self.weight)));
        }
        Ok(())
    }
}

/// `z + w (s_t − s_o)` on raw vectors.
pub fn shift_latent(z: &[f32], s_t: &[f32], s_o: &[f32], w: f32) -> Vec<f32> {
    z.iter()
        .zip(s_t.iter().zip(s_o))
        .map(|(&z, (&t, &o))| z + w * (t - o))
        .collect()
}

pub fn adjust_latent(z: &[f32], table: &StyleEmbeddingTable, req: &TransferRequest) -> Result<LatentVector> {
    req.validate(table.k)?;
    if z.len() != table.d {
        return Err(Error::usage("latent width differs from the style table"));
    }
    Ok(shift_latent(z, table.row(req.to)?, table.row(req.from)?, req.weight))
}

/// Transfers every sentence (all of style `req.from`). With `sampler`, the
/// latent is a posterior sample instead of the mean.
pub fn transfer_batch(models: &Models, sentences: &[Sentence], req: &TransferRequest, mut sampler: Option<&mut Rng>) -> Result<Vec<Vec<usize>>> {
    req.validate(models.style.k)?;
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(128) {
        let rows: Vec<&Sentence> = chunk.iter().collect();
        let batch = Batch::from_sentences(&rows, (0..rows.len()).collect())?;
        let cache = models.backbone.feature_cache(chunk)?;
        let feats = assemble_features(&cache, &batch)?;
        let dists = models.vae.encode_latent(&feats, &batch.pad, batch.shape())?;
        let mut conds = Vec::with_capacity(dists.len());
        for d in &dists {
            let z = match sampler.as_deref_mut() {
                Some(rng) => {
                    let eps = crate::tensor::Tensor::randn(&[d.mu.len()], 1.0, rng);
                    sample_latent(d, eps.data())?
                }
                None => d.mu.clone(),
            };
            conds.push(adjust_latent(&z, &models.style, req)?);
        }
        out.extend(models.vae.decode_greedy_batch(&conds, req.max_len)?);
    }
    Ok(out)
}

pub fn transfer_texts(models: &Models, vocab: &Vocab, sentences: &[Sentence], req: &TransferRequest, sampler: Option<&mut Rng>) -> Result<Vec<String>> {
    Ok(transfer_batch(models, sentences, req, sampler)?
        .iter()
        .map(|t| detokenize(t, vocab))
        .collect())
}

pub fn transfer_sentence(models: &Models, vocab: &Vocab, text: &str, req: &TransferRequest, max_content_len: usize) -> Result<String> {
    let s = crate::corpus::tokenize(text, vocab, req.from, max_content_len)?.sentence;
    Ok(transfer_texts(models, vocab, &[s], req, None)?.remove(0))
}

/// Evaluation models for sweeps.
pub struct Judges<'a> {
    pub classifier: &'a EvalClassifier,
    pub lm: &'a CharLm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w: f32,
    pub report: EvalReport,
}

/// Default target for a source style: the next style id, cyclically.
pub fn default_target(from: StyleId, k: usize) -> StyleId {
    (from + 1) % k
}

/// Transfers every test sentence to its default target style at weight `w`
/// and scores the outputs. Returns the report and the outputs.
pub fn evaluate_at(models: &Models, vocab: &Vocab, test: &[Sentence], w: f32, max_len: usize, judges: &Judges) -> Result<(EvalReport, Vec<String>)> {
    if test.is_empty() {
        return Err(Error::usage("empty test set"));
    }
    let k = models.style.k;
    let mut outputs = vec![String::new(); test.len()];
    let mut acc_hits = 0.0;
    for from in 0..k {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| test[i].style == from).collect();
        if idx.is_empty() {
            continue;
        }
        let src: Vec<Sentence> = idx.iter().map(|&i| test[i].clone()).collect();
        let req = TransferRequest {
            from,
            to: default_target(from, k),
            weight: w,
            max_len,
        };
        let texts = transfer_texts(models, vocab, &src, &req, None)?;
        acc_hits += transfer_accuracy(judges.classifier, &texts, req.to)? * texts.len() as f64 / 100.0;
        for (i, t) in idx.into_iter().zip(texts) {
            outputs[i] = t;
        }
    }
    let acc = 100.0 * acc_hits / test.len() as f64;
    let sources: Vec<String> = test.iter().map(|s| detokenize(&s.tokens, vocab)).collect();
    let bleu = bleu_single(&outputs, &sources)?;
    let nonempty: Vec<&str> = outputs.iter().map(String::as_str).collect();
    let ppl = judges.lm.perplexity(&nonempty)?;
    Ok((EvalReport::new(acc, ppl, bleu, test.len()), outputs))
}

pub fn sweep_style_weight(models: &Models, vocab: &Vocab, test: &[Sentence], weights: &[f32], max_len: usize, judges: &Judges) -> Result<Vec<SweepRow>> {
    if weights.is_empty() {
        return Err(Error::usage("empty weight list"));
    }
    weights
        .iter()
        .map(|&w| {
            let (report, _) = evaluate_at(models, vocab, test, w, max_len, judges)?;
            log::info!("w {w}: acc {:.2} ppl {:.2} bleu {:.2} gm {:.2}", report.acc, report.ppl, report.bleu, report.gm);
            Ok(SweepRow { w, report })
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "w,acc,ppl,bleu,gm";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{:.4}",
            r.w, r.report.acc, r.report.ppl, r.report.bleu, r.report.gm
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_identities() {
        assert_eq!(shift_latent(&[1.0, 1.0], &[1.0, 0.0], &[0.0, 1.0], 2.0), vec![3.0, -1.0]);
        assert_eq!(shift_latent(&[0.3, -0.7], &[5.0, 1.0], &[2.0, 2.0], 0.0), vec![0.3, -0.7]);
        assert_eq!(shift_latent(&[0.3, -0.7], &[5.0, 1.0], &[5.0, 1.0], 3.5), vec![0.3, -0.7]);
    }

    #[test]
    fn same_style_is_rejected() {
        let t = StyleEmbeddingTable::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let req = TransferRequest {
            from: 1,
            to: 1,
            weight: 1.0,
            max_len: 5,
        };
        assert!(matches!(adjust_latent(&[0.0, 0.0], &t, &req), Err(Error::Usage(_))));
        let req = TransferRequest { to: 2, ..req };
        assert!(adjust_latent(&[0.0, 0.0], &t, &req).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = vec![
            SweepRow {
                w: 0.5,
                report: EvalReport::new(50.0, 10.0, 20.0, 4),
            };
            5
        ];
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("w,acc,ppl,bleu,gm\n"));
        assert_eq!(csv.lines().count(), 6);
    }
}
