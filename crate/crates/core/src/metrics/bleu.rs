//! Corpus-level BLEU-4 following multi-bleu.perl: clipped n-gram precision,
//! closest-reference brevity penalty, no smoothing.

use std::collections::HashMap;

use crate::error::{Error, Result};

fn ngrams<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics of a corpus: matches and totals per order, hypothesis
/// length and effective reference length.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let n = self.matches.len() as f64;
        let log_p: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| (m as f64 / t as f64).ln())
            .sum::<f64>()
            / n;
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * log_p.exp()
    }
}

/// Statistics for whitespace-tokenized `hyps` against one or more references
/// per hypothesis.
pub fn bleu_stats<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[Vec<R>], max_n: usize) -> Result<BleuStats> {
    if hyps.is_empty() {
        return Err(Error::usage("BLEU needs at least one hypothesis"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::usage(format!(
            "{} hypotheses but {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    let mut st = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        ..BleuStats::default()
    };
    for (h, rs) in hyps.iter().zip(refs) {
        if rs.is_empty() {
            return Err(Error::usage("empty reference set"));
        }
        let ht: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rts: Vec<Vec<&str>> = rs.iter().map(|r| r.as_ref().split_whitespace().collect()).collect();
        st.hyp_len += ht.len();
        // closest reference length, shorter on ties
        st.ref_len += rts
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| ((l as i64 - ht.len() as i64).abs(), l))
            .unwrap();
        for n in 1..=max_n {
            let hc = ngrams(&ht, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for rt in &rts {
                for (g, c) in ngrams(rt, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            st.totals[n - 1] += ht.len().saturating_sub(n - 1);
            st.matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    Ok(st)
}

/// Corpus BLEU-4 in `[0, 100]`; with several references per hypothesis,
/// counts are clipped by the maximum over references.
pub fn bleu_score<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[Vec<R>]) -> Result<f64> {
    Ok(bleu_stats(hyps, refs, 4)?.score())
}

/// Single-reference convenience form.
pub fn bleu_single<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R]) -> Result<f64> {
    let sets: Vec<Vec<&str>> = refs.iter().map(|r| vec![r.as_ref()]).collect();
    bleu_score(hyps, &sets)
}

/// Mean of single-reference corpus BLEU over reference slot `j` of every set.
pub fn mean_reference_bleu<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[Vec<R>]) -> Result<f64> {
    let m = refs.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 {
        return Err(Error::usage("every hypothesis needs at least one reference"));
    }
    let mut total = 0.0;
    for j in 0..m {
        let slot: Vec<&str> = refs.iter().map(|r| r[j].as_ref()).collect();
        total += bleu_single(hyps, &slot)?;
    }
    Ok(total / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_match_is_100() {
        let h = ["the cat sat on the mat", "a b c d"];
        assert!((bleu_single(&h, &h).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn no_overlap_is_zero() {
        assert_eq!(bleu_single(&["x y z w"], &["a b c d"]).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_oracle() {
        // unigram 2/3 (second "the" clipped), bigram 1/2, trigram 0/1
        let st = bleu_stats(&["the the cat"], &[vec!["the cat sat"]], 4).unwrap();
        assert_eq!(st.matches[..3], [2, 1, 0]);
        assert_eq!(st.totals[..3], [3, 2, 1]);
        assert_eq!(st.score(), 0.0);
        let b2 = bleu_stats(&["the the cat"], &[vec!["the cat sat"]], 2).unwrap().score();
        assert!((b2 - 100.0 * (2.0f64 / 3.0 * 0.5).sqrt()).abs() < 0.01);
    }

    #[test]
    fn brevity_penalty() {
        let st = bleu_stats(&["a b c d"], &[vec!["a b c d e f"]], 4).unwrap();
        let want = 100.0 * (1.0f64 - 6.0 / 4.0).exp();
        assert!((st.score() - want).abs() < 1e-9);
    }

    #[test]
    fn multi_reference_clips_by_max() {
        let refs = vec![vec!["a a x y z", "a b c d e"]];
        let st = bleu_stats(&["a a b c d"], &refs, 1).unwrap();
        assert_eq!(st.matches[0], 5);
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        assert!(bleu_single(&["a"], &["a", "b"]).is_err());
        assert!(bleu_single::<&str, &str>(&[], &[]).is_err());
    }
}
