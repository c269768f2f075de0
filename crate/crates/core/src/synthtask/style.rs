use serde::{Deserialize, Serialize};

use super::vocab::{LEAD_LEN, OPENING_LEN};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthRegime {
    Short,
    Long,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelOrder {
    Ascending,
    Descending,
}

/// Report grammar for one style.
///
/// A report is `opening (finding-sentence | negation-sentence)* closing EOS`.
/// The opening is a prefix of the style's opening run; a finding sentence is
/// a prefix of the lead run, one finding phrase and the style's period; a
/// negation sentence is a negation token, the phrase of an absent label and
/// the period; the closing is the ordinal run `close#1 … close#L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub id: usize,
    pub regime: LengthRegime,
    /// Inclusive length range of the opening run.
    pub opening: (usize, usize),
    /// Inclusive length range of the lead run before each finding.
    pub lead: (usize, usize),
    pub order: LabelOrder,
    /// Negation sentences come before the findings instead of after.
    pub negations_first: bool,
    /// Probability that an absent label is mentioned in a negation sentence.
    pub negation_prob: f64,
    /// Index into each label's phrase variants.
    pub variant: usize,
    /// Closing-run length of the canonical (deployment) form of the style.
    pub closing_run: usize,
    /// Range the closing-run length is drawn from per pretraining episode.
    pub closing_range: (usize, usize),
}

impl StyleSpec {
    pub fn validate(&self, n_closing: usize) -> Result<()> {
        let field = |f: &str| format!("task.styles[{}].{f}", self.id);
        let (omin, omax) = self.opening;
        if omin > omax || omax > OPENING_LEN {
            return Err(Error::config(field("opening"), format!("need min <= max <= {OPENING_LEN}")));
        }
        let (lmin, lmax) = self.lead;
        if lmin > lmax || lmax > LEAD_LEN {
            return Err(Error::config(field("lead"), format!("need min <= max <= {LEAD_LEN}")));
        }
        if !(0.0..=1.0).contains(&self.negation_prob) {
            return Err(Error::config(field("negation_prob"), "must be in [0, 1]"));
        }
        let (cmin, cmax) = self.closing_range;
        if cmin == 0 || cmin > cmax || cmax > n_closing {
            return Err(Error::config(field("closing_range"), format!("need 1 <= min <= max <= {n_closing}")));
        }
        if self.closing_run == 0 || self.closing_run > n_closing {
            return Err(Error::config(field("closing_run"), format!("must be in 1..={n_closing}")));
        }
        Ok(())
    }

    /// Same style with a different closing-run convention.
    pub fn with_closing(&self, closing_run: usize) -> StyleSpec {
        StyleSpec {
            closing_run,
            ..self.clone()
        }
    }

    /// The four default styles: two short, two long.
    pub fn defaults() -> Vec<StyleSpec> {
        vec![
            StyleSpec {
                id: 0,
                regime: LengthRegime::Short,
                opening: (2, 3),
                lead: (1, 2),
                order: LabelOrder::Ascending,
                negations_first: false,
                negation_prob: 0.0,
                variant: 0,
                closing_run: 2,
                closing_range: (1, 6),
            },
            StyleSpec {
                id: 1,
                regime: LengthRegime::Long,
                opening: (4, 5),
                lead: (3, 4),
                order: LabelOrder::Ascending,
                negations_first: false,
                negation_prob: 0.15,
                variant: 2,
                closing_run: 6,
                closing_range: (2, 12),
            },
            StyleSpec {
                id: 2,
                regime: LengthRegime::Short,
                opening: (2, 3),
                lead: (1, 2),
                order: LabelOrder::Descending,
                negations_first: false,
                negation_prob: 0.0,
                variant: 1,
                closing_run: 2,
                closing_range: (1, 6),
            },
            StyleSpec {
                id: 3,
                regime: LengthRegime::Long,
                opening: (4, 5),
                lead: (3, 4),
                order: LabelOrder::Descending,
                negations_first: true,
                negation_prob: 0.15,
                variant: 0,
                closing_run: 6,
                closing_range: (2, 12),
            },
        ]
    }
}
