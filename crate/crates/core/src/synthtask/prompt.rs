use std::ops::Range;

use super::sample::CaseRecord;
use super::vocab::{TokenId, BOS, COND, DEMO, REPORT};
use crate::error::{Error, Result};

/// Token layout of one prompt plus its (teacher-forced) answer.
///
/// `[BOS] ([DEMO] demo-report)* [COND] observations [REPORT] answer`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub tokens: Vec<TokenId>,
    pub answer: Range<usize>,
    pub demos: Vec<Range<usize>>,
    pub condition: Range<usize>,
}

impl PromptLayout {
    /// Positions whose logits predict the answer tokens (`answer.start - 1 ..`).
    pub fn predicting_positions(&self) -> Range<usize> {
        self.answer.start - 1..self.answer.end - 1
    }

    pub fn answer_tokens(&self) -> &[TokenId] {
        &self.tokens[self.answer.clone()]
    }

    /// Prefix fed to the model under teacher forcing (the last answer token is
    /// never an input).
    pub fn model_input(&self) -> &[TokenId] {
        &self.tokens[..self.answer.end - 1]
    }
}

/// Query prompt without any answer: what the deployed student receives.
pub fn query_tokens(condition: &[TokenId]) -> Vec<TokenId> {
    let mut t = Vec::with_capacity(condition.len() + 3);
    t.push(BOS);
    t.push(COND);
    t.extend_from_slice(condition);
    t.push(REPORT);
    t
}

/// Lays out demos (report text only), the query condition and the reference
/// answer. With no demos the layout is exactly the student prompt.
pub fn build_prompt(case: &CaseRecord, demos: &[&CaseRecord], max_context: usize) -> Result<PromptLayout> {
    build_prompt_from_parts(&case.condition, &case.report, demos.iter().map(|d| d.report.as_slice()), max_context)
}

pub fn build_prompt_from_parts<'a>(
    condition: &[TokenId],
    answer: &[TokenId],
    demo_reports: impl IntoIterator<Item = &'a [TokenId]>,
    max_context: usize,
) -> Result<PromptLayout> {
    if answer.is_empty() {
        return Err(Error::InvalidArgument("empty answer region".into()));
    }
    let mut tokens = vec![BOS];
    let mut demos = Vec::new();
    for r in demo_reports {
        tokens.push(DEMO);
        let start = tokens.len();
        tokens.extend_from_slice(r);
        demos.push(start..tokens.len());
    }
    tokens.push(COND);
    let cstart = tokens.len();
    tokens.extend_from_slice(condition);
    let condition = cstart..tokens.len();
    tokens.push(REPORT);
    let astart = tokens.len();
    tokens.extend_from_slice(answer);
    let answer = astart..tokens.len();
    // the model reads every token but the last
    if tokens.len() - 1 > max_context {
        return Err(Error::ContextOverflow {
            needed: tokens.len() - 1,
            max: max_context,
        });
    }
    Ok(PromptLayout {
        tokens,
        answer,
        demos,
        condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthtask::sample::Split;
    use crate::synthtask::vocab::EOS;

    fn case(id: u64, report_len: usize) -> CaseRecord {
        let mut report: Vec<TokenId> = (0..report_len as u32 - 1).map(|i| 100 + i).collect();
        report.push(EOS);
        CaseRecord {
            id,
            style: 1,
            condition: vec![7, 9],
            report,
            labels: vec![],
            split: Split::Distill,
        }
    }

    #[test]
    fn zero_demos_is_the_student_prompt() {
        let q = case(0, 6);
        let p = build_prompt(&q, &[], 512).unwrap();
        assert_eq!(&p.tokens[..p.answer.start], &query_tokens(&q.condition)[..]);
        assert_eq!(p.answer_tokens(), &q.report[..]);
        assert!(p.demos.is_empty());
    }

    #[test]
    fn demos_only_shift_offsets() {
        let q = case(0, 6);
        let demos: Vec<CaseRecord> = (1..=8).map(|i| case(i, 10)).collect();
        let refs: Vec<&CaseRecord> = demos.iter().collect();
        let p0 = build_prompt(&q, &[], 512).unwrap();
        let p8 = build_prompt(&q, &refs, 512).unwrap();
        assert_eq!(p0.answer_tokens(), p8.answer_tokens());
        assert_eq!(p8.answer.start - p0.answer.start, 8 * 11);
        assert!(p8.demos.iter().all(|d| d.end <= p8.condition.start));
        assert!(p8.condition.end < p8.answer.start);
    }

    #[test]
    fn prompt_length_is_affine_in_shots() {
        let q = case(0, 6);
        let demos: Vec<CaseRecord> = (1..=8).map(|i| case(i, 12)).collect();
        let len = |k: usize| {
            let refs: Vec<&CaseRecord> = demos[..k].iter().collect();
            build_prompt(&q, &refs, 512).unwrap().tokens.len()
        };
        let (l0, l4, l8) = (len(0), len(4), len(8));
        assert_eq!(l4 - l0, l8 - l4);
        assert_eq!(l4 - l0, 4 * 13);
    }

    #[test]
    fn overflow_is_reported() {
        let q = case(0, 6);
        let demos: Vec<CaseRecord> = (1..=8).map(|i| case(i, 40)).collect();
        let refs: Vec<&CaseRecord> = demos.iter().collect();
        match build_prompt(&q, &refs, 64) {
            Err(Error::ContextOverflow { needed, max }) => {
                assert_eq!(max, 64);
                assert!(needed > 64);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
