//! Lexical metrics, length statistics and finding-level F1.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::Matcher;
use crate::synthtask::TokenId;

/// Numerator used for an n-gram order with no clipped matches.
pub const BLEU_EPSILON: f64 = 0.1;

fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram total for one pair.
pub(crate) fn clipped_counts(cand: &[TokenId], reference: &[TokenId], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Combines corpus statistics into cumulative BLEU-1..=max_n percentages.
pub(crate) fn bleu_from_counts(matched: &[usize], totals: &[usize], cand_len: usize, ref_len: usize) -> Vec<f64> {
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(matched.len());
    let mut dead = false;
    for (i, (&m, &t)) in matched.iter().zip(totals).enumerate() {
        if t == 0 {
            dead = true;
        } else {
            let p = if m == 0 { BLEU_EPSILON / t as f64 } else { m as f64 / t as f64 };
            log_sum += p.ln();
        }
        out.push(if dead || bp == 0.0 {
            0.0
        } else {
            100.0 * bp * (log_sum / (i + 1) as f64).exp()
        });
    }
    out
}

/// Corpus BLEU with one reference per candidate. Returns cumulative BLEU-n
/// for n = 1..=max_n as percentages.
pub fn bleu(candidates: &[Vec<TokenId>], references: &[Vec<TokenId>], max_n: usize) -> Result<Vec<f64>> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "BLEU needs a nonempty aligned corpus, got {} candidates and {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be positive".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cl, mut rl) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        cl += c.len();
        rl += r.len();
        for n in 1..=max_n {
            let (m, t) = clipped_counts(c, r, n);
            matched[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    Ok(bleu_from_counts(&matched, &totals, cl, rl))
}

pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub(crate) fn rouge_from_lcs(lcs: usize, cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 && ref_len == 0 {
        return 100.0;
    }
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand_len as f64;
    let r = lcs as f64 / ref_len as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// LCS-based F1 as a percentage.
pub fn rouge_l(candidate: &[TokenId], reference: &[TokenId]) -> f64 {
    rouge_from_lcs(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// Mean sentence ROUGE-L over a corpus.
pub fn corpus_rouge_l(candidates: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::InvalidArgument("ROUGE-L needs a nonempty aligned corpus".into()));
    }
    let s: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r)).sum();
    Ok(s / candidates.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean_len: f64,
    pub mean_delta: f64,
    pub mae_delta: f64,
    /// Percent of cases with `ΔLen < −threshold`.
    pub under: f64,
    /// Percent with `ΔLen > threshold`.
    pub over: f64,
    /// Percent with `|ΔLen| ≤ threshold`.
    pub proper: f64,
}

/// Length statistics over `(generated_len, reference_len)` pairs.
pub fn length_stats(pairs: &[(usize, usize)], threshold: usize) -> Result<LengthStats> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no length pairs".into()));
    }
    let n = pairs.len() as f64;
    let th = threshold as i64;
    let (mut len, mut delta, mut abs) = (0.0, 0.0, 0.0);
    let (mut u, mut o, mut p) = (0usize, 0usize, 0usize);
    for &(g, r) in pairs {
        let d = g as i64 - r as i64;
        len += g as f64;
        delta += d as f64;
        abs += d.abs() as f64;
        if d < -th {
            u += 1;
        } else if d > th {
            o += 1;
        } else {
            p += 1;
        }
    }
    Ok(LengthStats {
        mean_len: len / n,
        mean_delta: delta / n,
        mae_delta: abs / n,
        under: 100.0 * u as f64 / n,
        over: 100.0 * o as f64 / n,
        proper: 100.0 * p as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged label P/R/F1 (percentages) of generated reports against
/// ground-truth label sets.
pub fn finding_f1(
    generated: &[Vec<TokenId>],
    truth: &[BTreeSet<usize>],
    matcher: &Matcher,
    negations: &[TokenId],
) -> Result<FindingScores> {
    if generated.len() != truth.len() {
        return Err(Error::InvalidArgument("generations and label sets differ in count".into()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (g, t) in generated.iter().zip(truth) {
        let pred = matcher.extract_labels(g, negations);
        tp += pred.intersection(t).count();
        fp += pred.difference(t).count();
        fneg += t.difference(&pred).count();
    }
    if tp + fp + fneg == 0 {
        return Ok(FindingScores {
            precision: 100.0,
            recall: 100.0,
            f1: 100.0,
        });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fneg);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok(FindingScores {
        precision: 100.0 * p,
        recall: 100.0 * r,
        f1: 100.0 * f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{compile_matcher, PhraseLexicon};

    #[test]
    fn bleu_hand_examples() {
        let c = vec![vec![1, 2, 3, 4]];
        let r = vec![vec![1, 2, 9, 4]];
        let b = bleu(&c, &r, 4).unwrap();
        assert!((b[0] - 75.0).abs() < 1e-12);
        let same = bleu(&r, &r, 4).unwrap();
        assert!((same[0] - 100.0).abs() < 1e-12 && (same[3] - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&[vec![]], &r, 4).unwrap(), vec![0.0; 4]);
        assert!(bleu(&[], &[], 4).is_err());
    }

    #[test]
    fn brevity_penalty_applies() {
        let b = bleu(&[vec![1, 2]], &[vec![1, 2, 3, 4]], 1).unwrap();
        assert!((b[0] - 100.0 * (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_hand_examples() {
        assert!((rouge_l(&[1, 2, 3], &[1, 9, 3]) - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[1, 2], &[1, 2]), 100.0);
        assert_eq!(rouge_l(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(rouge_l(&[], &[]), 100.0);
        assert_eq!(rouge_l(&[], &[1]), 0.0);
    }

    #[test]
    fn length_examples() {
        let s = length_stats(&[(10, 10), (7, 7)], 5).unwrap();
        assert_eq!((s.mean_delta, s.mae_delta, s.proper), (0.0, 0.0, 100.0));
        let s = length_stats(&[(0, 10), (20, 10)], 5).unwrap();
        assert_eq!((s.mean_delta, s.mae_delta), (0.0, 10.0));
        assert_eq!((s.under, s.over, s.proper), (50.0, 50.0, 0.0));
        // boundary: |Δ| = 5 is proper
        let s = length_stats(&[(15, 10), (4, 10)], 5).unwrap();
        assert_eq!((s.proper, s.under), (50.0, 50.0));
    }

    #[test]
    fn f1_examples() {
        let lex = PhraseLexicon::new(3, [(0, vec![10]), (1, vec![11]), (2, vec![12])]).unwrap();
        let m = compile_matcher(&lex);
        let truth = vec![BTreeSet::from([0, 1])];
        let s = finding_f1(&[vec![10, 12]], &truth, &m, &[99]).unwrap();
        assert!((s.precision - 50.0).abs() < 1e-12 && (s.recall - 50.0).abs() < 1e-12);
        assert!((s.f1 - 50.0).abs() < 1e-12);
        let s = finding_f1(&[vec![]], &truth, &m, &[99]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        // a negated mention does not count
        let s = finding_f1(&[vec![10, 99, 11]], &truth, &m, &[99]).unwrap();
        assert!((s.recall - 50.0).abs() < 1e-12 && s.precision == 100.0);
    }
}
