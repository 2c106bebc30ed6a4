//! Evaluation metrics: style accuracy, fluency, content preservation.

mod bleu;
mod charlm;
mod classifier;

pub use bleu::{bleu_score, bleu_single, bleu_stats, mean_reference_bleu, BleuStats};
pub use charlm::{train_char_lm, CharLm, CharLmDims, CharLmTraining};
pub use classifier::{hashed_features, train_eval_classifier, transfer_accuracy, ClassifierTraining, EvalClassifier};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(acc · bleu · 1/ln ppl)^(1/3)` with `acc` and `bleu` in percent.
pub fn geometric_mean(acc: f64, bleu: f64, ppl: f64) -> Result<f64> {
    if !(ppl > 1.0) {
        return Err(Error::usage(format!("perplexity must exceed 1, got {ppl}")));
    }
    Ok((acc * bleu / ppl.ln()).cbrt())
}

/// Spearman rank correlation with average ranks for ties; `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Share of `source` anchor tokens (those for which `is_anchor` holds) that
/// also appear in `output`, clipped per token type.
pub fn anchor_overlap(source: &str, output: &str, is_anchor: impl Fn(&str) -> bool) -> Option<f64> {
    use std::collections::HashMap;
    let mut want: HashMap<&str, usize> = HashMap::new();
    for w in source.split_whitespace().filter(|w| is_anchor(w)) {
        *want.entry(w).or_insert(0) += 1;
    }
    let total: usize = want.values().sum();
    if total == 0 {
        return None;
    }
    let mut have: HashMap<&str, usize> = HashMap::new();
    for w in output.split_whitespace() {
        *have.entry(w).or_insert(0) += 1;
    }
    let hit: usize = want.iter().map(|(w, &c)| c.min(have.get(w).copied().unwrap_or(0))).sum();
    Some(hit as f64 / total as f64)
}

/// The `evaluate` report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub ppl: f64,
    pub bleu: f64,
    pub gm: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn new(acc: f64, ppl: f64, bleu: f64, n: usize) -> Self {
        let gm = geometric_mean(acc, bleu, ppl).unwrap_or(f64::NAN);
        Self { acc, ppl, bleu, gm, n }
    }

    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8} {:>6}\n{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>6}\n",
            "acc", "ppl", "bleu", "gm", "n", self.acc, self.ppl, self.bleu, self.gm, self.n
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gm_table_rows() {
        for (a, b, p, want) in [
            (91.1, 23.97, 30.78, 8.61),
            (91.7, 18.51, 38.35, 7.75),
            (84.3, 22.82, 25.27, 8.41),
            (83.9, 28.29, 43.60, 8.57),
        ] {
            let gm = geometric_mean(a, b, p).unwrap();
            assert!((gm - want).abs() <= 0.01, "{gm} vs {want}");
        }
        assert!((geometric_mean(1.0, 1.0, std::f64::consts::E).unwrap() - 1.0).abs() < 1e-12);
        assert!(geometric_mean(50.0, 20.0, 1.0).is_err());
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[2.0, 4.0, 9.0, 10.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[1.0, 1.0, 2.0, 3.0, 4.0]) - 0.974_679_434).abs() < 1e-6);
        assert!(spearman(&x, &[1.0; 5]).is_nan());
    }

    #[test]
    fn overlap_counts_anchors_only() {
        let is_anchor = |w: &str| w != "great" && w != "awful";
        assert_eq!(anchor_overlap("the food was great", "the food was awful", is_anchor), Some(1.0));
        assert_eq!(anchor_overlap("the food", "the", is_anchor), Some(0.5));
        assert_eq!(anchor_overlap("great", "awful", is_anchor), None);
    }
}
