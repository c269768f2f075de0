use rand::Rng;
use serde::{Deserialize, Serialize};

use super::style::{LabelOrder, StyleSpec};
use super::vocab::{FindingForm, TokenClass, TokenId, VocabLayout, EOS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Distill,
    Pool,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Distill, Split::Pool, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Distill => "distill",
            Split::Pool => "pool",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One synthetic case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: u64,
    pub style: usize,
    /// Observation tokens (noisy encoding of the active labels), ascending.
    pub condition: Vec<TokenId>,
    /// Reference report; ends with the single EOS.
    pub report: Vec<TokenId>,
    /// Active labels, ascending.
    pub labels: Vec<usize>,
    pub split: Split,
}

/// Phrase variants of a label, in variant-index order.
///
/// Variant 0 is the lowercase head, variant 1 its capitalized form, variant 2
/// a qualifier followed by the leading-space head (plus a tail token on even
/// labels, giving a 3-token phrase).
pub fn phrase_variants(layout: &VocabLayout, label: usize) -> Vec<Vec<TokenId>> {
    let f = |form| layout.finding(label, form);
    let mut long = vec![f(FindingForm::Qualifier), f(FindingForm::SpaceLower)];
    if label % 2 == 0 {
        long.push(f(FindingForm::Tail));
    }
    vec![vec![f(FindingForm::Lower)], vec![f(FindingForm::Capital)], long]
}

pub fn phrase(layout: &VocabLayout, label: usize, variant: usize) -> Vec<TokenId> {
    let mut v = phrase_variants(layout, label);
    let i = variant.min(v.len() - 1);
    v.swap_remove(i)
}

fn run_len<R: Rng>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// Report for a given active-label mask.
pub fn sample_report<R: Rng>(
    style: &StyleSpec,
    layout: &VocabLayout,
    active: &[bool],
    rng: &mut R,
) -> Vec<TokenId> {
    let s = style.id;
    let mut out = Vec::new();
    let n_open = run_len(rng, style.opening);
    out.extend((0..n_open).map(|i| layout.opening(s, i)));

    let mut order: Vec<usize> = (0..layout.n_labels).collect();
    if style.order == LabelOrder::Descending {
        order.reverse();
    }
    let mut findings = Vec::new();
    let mut negations = Vec::new();
    for &l in &order {
        if active[l] {
            let n_lead = run_len(rng, style.lead);
            findings.extend((0..n_lead).map(|i| layout.lead(s, i)));
            findings.extend(phrase(layout, l, style.variant));
            findings.push(layout.period(s));
        } else if style.negation_prob > 0.0 && rng.random::<f64>() < style.negation_prob {
            let neg = rng.random_range(0..2);
            negations.push(layout.negation(neg));
            negations.extend(phrase(layout, l, style.variant));
            negations.push(layout.period(s));
        }
    }
    if style.negations_first {
        out.extend(negations);
        out.extend(findings);
    } else {
        out.extend(findings);
        out.extend(negations);
    }
    out.extend((1..=style.closing_run).map(|j| layout.closing(j)));
    out.push(EOS);
    out
}

/// Draws the active label set, its noisy observation and the report.
pub fn sample_case<R: Rng>(
    id: u64,
    style: &StyleSpec,
    layout: &VocabLayout,
    priors: &[f64],
    flip_noise: f64,
    split: Split,
    rng: &mut R,
) -> CaseRecord {
    debug_assert_eq!(priors.len(), layout.n_labels);
    let active: Vec<bool> = priors.iter().map(|&p| rng.random::<f64>() < p).collect();
    let condition = active
        .iter()
        .enumerate()
        .filter_map(|(l, &a)| {
            let flip = rng.random::<f64>() < flip_noise;
            (a != flip).then(|| layout.observation(l))
        })
        .collect();
    let report = sample_report(style, layout, &active, rng);
    CaseRecord {
        id,
        style: style.id,
        condition,
        report,
        labels: (0..layout.n_labels).filter(|&l| active[l]).collect(),
        split,
    }
}

/// Structural decomposition of a report under its style grammar.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedReport {
    pub opening: usize,
    /// `(label, negated)` in report order.
    pub sentences: Vec<(usize, bool)>,
    pub closing: usize,
}

/// Parses a report back into opening, sentences, closing run and EOS.
pub fn parse_report(report: &[TokenId], style: &StyleSpec, layout: &VocabLayout) -> Result<ParsedReport> {
    let bad = |at: usize, why: &str| Error::format("report", format!("position {at}: {why}"));
    let s = style.id;
    let mut i = 0;
    let mut opening = 0;
    while i < report.len() && opening < super::vocab::OPENING_LEN && report[i] == layout.opening(s, opening) {
        opening += 1;
        i += 1;
    }
    if opening < style.opening.0 || opening > style.opening.1 {
        return Err(bad(i, "opening run length outside the style range"));
    }
    let mut sentences = Vec::new();
    loop {
        if i >= report.len() {
            return Err(bad(i, "report ended before EOS"));
        }
        let t = report[i];
        let negated = layout.class(t) == TokenClass::Negation;
        if negated {
            i += 1;
        } else if layout.class(t) == TokenClass::Closing || t == EOS {
            break;
        } else {
            let mut n_lead = 0;
            while i < report.len() && n_lead < super::vocab::LEAD_LEN && report[i] == layout.lead(s, n_lead) {
                n_lead += 1;
                i += 1;
            }
            if n_lead < style.lead.0 || n_lead > style.lead.1 {
                return Err(bad(i, "lead run length outside the style range"));
            }
        }
        let label = report
            .get(i)
            .and_then(|&t| layout.finding_label(t))
            .ok_or_else(|| bad(i, "expected a finding phrase"))?;
        let p = phrase(layout, label, style.variant);
        if report.get(i..i + p.len()) != Some(&p[..]) {
            return Err(bad(i, "phrase does not match the style variant"));
        }
        i += p.len();
        if report.get(i) != Some(&layout.period(s)) {
            return Err(bad(i, "expected the style period"));
        }
        i += 1;
        sentences.push((label, negated));
    }
    let mut closing = 0;
    while i < report.len() && layout.closing_index(report[i]) == Some(closing + 1) {
        closing += 1;
        i += 1;
    }
    if report.get(i) != Some(&EOS) || i + 1 != report.len() {
        return Err(bad(i, "expected a single final EOS after the closing run"));
    }
    Ok(ParsedReport {
        opening,
        sentences,
        closing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> VocabLayout {
        VocabLayout::new(14, 4, 12).unwrap()
    }

    #[test]
    fn zero_priors_give_no_findings() {
        let l = layout();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for style in StyleSpec::defaults() {
            for _ in 0..50 {
                let c = sample_case(0, &style, &l, &[0.0; 14], 0.0, Split::Test, &mut rng);
                assert!(c.labels.is_empty());
                for (i, &t) in c.report.iter().enumerate() {
                    if l.class(t) == TokenClass::Finding {
                        // only inside negation sentences
                        let prev_neg = c.report[..i].iter().rev().find(|&&p| l.class(p) != TokenClass::Finding);
                        assert_eq!(prev_neg.map(|&p| l.class(p)), Some(TokenClass::Negation));
                    }
                }
                assert_eq!(*c.report.last().unwrap(), EOS);
            }
        }
    }

    #[test]
    fn expected_active_count_matches_prior() {
        let l = layout();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let style = &StyleSpec::defaults()[1];
        let n = 20_000;
        let total: usize = (0..n)
            .map(|i| sample_case(i, style, &l, &[0.25; 14], 0.05, Split::Test, &mut rng).labels.len())
            .sum();
        let mean = total as f64 / n as f64;
        // 14 * 0.25 = 3.5; binomial sd of the mean ≈ 0.011
        assert!((mean - 3.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn every_report_parses_with_unique_final_eos() {
        let l = layout();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for style in StyleSpec::defaults() {
            for i in 0..500 {
                let c = sample_case(i, &style, &l, &[0.3; 14], 0.05, Split::Distill, &mut rng);
                let p = parse_report(&c.report, &style, &l).unwrap();
                assert_eq!(p.closing, style.closing_run);
                let found: Vec<usize> = {
                    let mut v: Vec<usize> = p.sentences.iter().filter(|s| !s.1).map(|s| s.0).collect();
                    v.sort();
                    v
                };
                assert_eq!(found, c.labels);
                assert_eq!(c.report.iter().filter(|&&t| t == EOS).count(), 1);
            }
        }
    }

    #[test]
    fn parse_rejects_missing_eos() {
        let l = layout();
        let style = &StyleSpec::defaults()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = sample_case(0, style, &l, &[0.3; 14], 0.0, Split::Test, &mut rng);
        c.report.pop();
        assert!(parse_report(&c.report, style, &l).is_err());
    }

    #[test]
    fn long_phrases_have_three_tokens_on_even_labels() {
        let l = layout();
        assert_eq!(phrase(&l, 4, 2).len(), 3);
        assert_eq!(phrase(&l, 5, 2).len(), 2);
        assert_eq!(phrase(&l, 5, 1).len(), 1);
    }
}
