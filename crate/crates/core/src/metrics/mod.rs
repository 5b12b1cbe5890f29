//! Corpus BLEU-1..4, ROUGE-L and an exact-match METEOR variant.
//!
//! Text is case-folded and split on whitespace before scoring.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "BL1")]
    pub bleu1: f64,
    #[serde(rename = "BL2")]
    pub bleu2: f64,
    #[serde(rename = "BL3")]
    pub bleu3: f64,
    #[serde(rename = "BL4")]
    pub bleu4: f64,
    #[serde(rename = "RGL")]
    pub rouge_l: f64,
    #[serde(rename = "MTR")]
    pub meteor: f64,
}

impl MetricReport {
    pub fn bleu(&self, n: usize) -> f64 {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4][n - 1]
    }

    pub fn values(&self) -> [f64; 6] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l, self.meteor]
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn check_aligned<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Contract("metrics need a nonempty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// n-gram counts of a single order.
pub type NGramCounts<'a> = HashMap<&'a [String], usize>;

pub fn ngram_counts(tokens: &[String], n: usize) -> NGramCounts<'_> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-1 through BLEU-`max_n` with clipped counts summed over the
/// corpus and a single brevity penalty. No smoothing.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], max_n: usize) -> Result<Vec<f64>> {
    check_aligned(hyps, refs)?;
    let mut matched = vec![0usize; max_n];
    let mut possible = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (tokenize(h.as_ref()), tokenize(r.as_ref()));
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(&r, n);
            for (gram, c) in ngram_counts(&h, n) {
                matched[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            possible[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / possible[n] as f64).ln();
        }
        scores.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    Ok(scores)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS F-measure of one pair.
pub fn rouge_l_pair(hyp: &str, reference: &str, beta: f64) -> f64 {
    let (h, r) = (tokenize(hyp), tokenize(reference));
    let lcs = lcs_len(&h, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / h.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean pairwise ROUGE-L.
pub fn rouge_l<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], beta: f64) -> Result<f64> {
    check_aligned(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| rouge_l_pair(h.as_ref(), r.as_ref(), beta))
        .sum();
    Ok(total / hyps.len() as f64)
}

/// METEOR with exact unigram matching only. Each hypothesis token, left to
/// right, takes the first unused identical reference token.
pub fn meteor_pair(hyp: &str, reference: &str) -> f64 {
    let (h, r) = (tokenize(hyp), tokenize(reference));
    let mut used = vec![false; r.len()];
    let mut alignment: Vec<(usize, usize)> = Vec::new();
    for (i, tok) in h.iter().enumerate() {
        if let Some(j) = (0..r.len()).find(|&j| !used[j] && r[j] == *tok) {
            used[j] = true;
            alignment.push((i, j));
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / h.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

pub fn meteor_lite<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    check_aligned(hyps, refs)?;
    let total: f64 = hyps.iter().zip(refs).map(|(h, r)| meteor_pair(h.as_ref(), r.as_ref())).sum();
    Ok(total / hyps.len() as f64)
}

/// Every metric over one aligned corpus.
pub fn score_corpus<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<MetricReport> {
    let b = bleu(hyps, refs, 4)?;
    Ok(MetricReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge_l(hyps, refs, ROUGE_BETA)?,
        meteor: meteor_lite(hyps, refs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{templatize, SceneSpec};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn bleu_examples() {
        let b = bleu(&["the the the"], &["the cat"], 4).unwrap();
        assert!(close(b[0], 1.0 / 3.0));
        let b = bleu(&["a b"], &["a b c d"], 1).unwrap();
        assert!(close(b[0], (-1.0f64).exp()));
        let b = bleu(&["a b c d", "x y z w v"], &["a b c d", "x y z w v"], 4).unwrap();
        assert_eq!(b, vec![1.0; 4]);
    }

    #[test]
    fn bleu_zero_precision_zeroes_higher_orders() {
        let b = bleu(&["a b a b"], &["a a b b"], 4).unwrap();
        assert!(b[0] > 0.0 && b[1] > 0.0);
        assert_eq!(b[2], 0.0);
        assert_eq!(b[3], 0.0);
        assert_eq!(bleu(&[""], &["a"], 4).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn bleu_is_case_folded_and_rejects_empty_corpus() {
        assert_eq!(bleu(&["The Cat"], &["the cat"], 2).unwrap(), vec![1.0, 1.0]);
        let empty: [&str; 0] = [];
        assert!(bleu(&empty, &empty, 4).is_err());
        assert!(bleu(&["a"], &["a", "b"], 4).is_err());
    }

    #[test]
    fn rouge_examples() {
        assert!(close(rouge_l_pair("a b c d", "a c d", ROUGE_BETA), 2.44 * 0.75 / (1.0 + 1.44 * 0.75)));
        assert!(close(rouge_l_pair("a b c d", "a c d", ROUGE_BETA), 0.879_807_692_307_692_3));
        assert_eq!(rouge_l_pair("a b c", "a b c", ROUGE_BETA), 1.0);
        assert_eq!(rouge_l_pair("a b", "c d", ROUGE_BETA), 0.0);
        assert_eq!(rouge_l_pair("", "c d", ROUGE_BETA), 0.0);
    }

    #[test]
    fn meteor_examples() {
        assert!(close(meteor_pair("a b c", "a b c"), 1.0 - 0.5 / 27.0));
        assert_eq!(meteor_pair("x y", "a b"), 0.0);
        assert!(close(meteor_pair("b a", "a b"), 0.5));
        assert_eq!(meteor_pair("", "a b"), 0.0);
    }

    /// Longest common subsequence by enumerating every subsequence of `a`.
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let is_subseq = |s: &[u8]| {
            let mut it = b.iter();
            s.iter().all(|c| it.any(|d| d == c))
        };
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let s: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
                is_subseq(&s).then_some(s.len())
            })
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn lcs_matches_exhaustive_oracle() {
        use rand::Rng as _;
        let mut r = crate::rng::stream(0, "lcs");
        for _ in 0..2000 {
            let la = r.random_range(0..=8);
            let lb = r.random_range(0..=8);
            let a: Vec<u8> = (0..la).map(|_| r.random_range(0..4)).collect();
            let b: Vec<u8> = (0..lb).map(|_| r.random_range(0..4)).collect();
            assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b), "{a:?} {b:?}");
        }
    }

    fn reports(seeds: &[u64]) -> Vec<String> {
        seeds.iter().map(|s| templatize(&SceneSpec::sample(*s, 3))).collect()
    }

    proptest! {
        #[test]
        fn identity_corpus_scores_one(seeds in proptest::collection::vec(any::<u64>(), 1..10)) {
            let refs = reports(&seeds);
            let m = score_corpus(&refs, &refs).unwrap();
            prop_assert_eq!(&m.values()[..5], &[1.0; 5]);
            prop_assert!(m.meteor > 0.9 && m.meteor <= 1.0);
        }

        #[test]
        fn scores_bounded_and_permutation_invariant(
            hs in proptest::collection::vec(any::<u64>(), 2..10),
            rot in 1usize..9,
        ) {
            let hyps = reports(&hs);
            let refs = reports(&hs.iter().map(|s| s.wrapping_mul(31).wrapping_add(7)).collect::<Vec<_>>());
            let m = score_corpus(&hyps, &refs).unwrap();
            prop_assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
            let k = rot % hyps.len();
            let mut h2 = hyps.clone();
            let mut r2 = refs.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            let m2 = score_corpus(&h2, &r2).unwrap();
            for (a, b) in m.values().iter().zip(m2.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn bleu_orders_are_monotone_when_precisions_fall(
            hs in proptest::collection::vec(any::<u64>(), 1..10),
        ) {
            let hyps = reports(&hs);
            let refs = reports(&hs.iter().map(|s| s ^ 0x5555).collect::<Vec<_>>());
            let b = bleu(&hyps, &refs, 4).unwrap();
            // premise: every p_n positive and non-increasing
            let precisions: Vec<f64> = (1..=4).map(|n| {
                let (mut m, mut t) = (0usize, 0usize);
                for (h, r) in hyps.iter().zip(&refs) {
                    let (h, r) = (tokenize(h), tokenize(r));
                    let rc = ngram_counts(&r, n);
                    for (g, c) in ngram_counts(&h, n) {
                        m += c.min(rc.get(g).copied().unwrap_or(0));
                    }
                    t += h.len().saturating_sub(n - 1);
                }
                m as f64 / t as f64
            }).collect();
            prop_assume!(precisions.iter().all(|p| *p > 0.0) && precisions.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(b[3] <= b[2] + 1e-15 && b[2] <= b[1] + 1e-15 && b[1] <= b[0] + 1e-15);
        }
    }
}
