//! EOS probability profile around the reference report boundary.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Decoder, RowHook};
use crate::error::{Error, Result};
use crate::numeric::ops::softmax;
use crate::steering::decay_schedule;
use crate::synthtask::{query_tokens, CaseRecord, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EosProfile {
    /// Offsets `-before..=after`; 0 is the reference EOS position.
    pub offsets: Vec<i64>,
    pub mean_prob: Vec<f64>,
    /// Cases contributing to each offset.
    pub counts: Vec<usize>,
}

impl EosProfile {
    pub fn at(&self, offset: i64) -> Option<f64> {
        self.offsets.iter().position(|&o| o == offset).map(|i| self.mean_prob[i])
    }
}

/// P(EOS) per offset for one case.
fn case_profile(
    model: &Backbone,
    hook: Option<&dyn RowHook>,
    case: &CaseRecord,
    before: usize,
    after: usize,
    decay_rate: f64,
) -> Result<Vec<Option<f64>>> {
    let report = &case.report;
    if report.last() != Some(&EOS) {
        return Err(Error::InvalidArgument(format!("case {} reference lacks EOS", case.id)));
    }
    let boundary = report.len() - 1;
    let query = query_tokens(&case.condition);
    let mut dec = Decoder::new(model, hook);
    dec.prefill(&query[..query.len() - 1])?;
    let mut out = vec![None; before + 1 + after];
    // teacher-forced on the reference prefix: step j predicts report[j]
    let mut logits = dec.step(*query.last().unwrap(), decay_schedule(0, decay_rate))?;
    for j in 0..=boundary {
        if boundary - j <= before {
            out[before - (boundary - j)] = Some(softmax(&logits, 1.0)?[EOS as usize]);
        }
        if j == boundary {
            break;
        }
        logits = dec.step(report[j], decay_schedule(j + 1, decay_rate))?;
    }
    // past the boundary, continue with the greedy non-EOS token
    let mut j = boundary;
    for k in 1..=after {
        if dec.len() + 1 > model.config.max_context {
            break;
        }
        let next = logits
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != EOS as usize)
            .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0 as u32;
        j += 1;
        logits = dec.step(next, decay_schedule(j, decay_rate))?;
        out[before + k] = Some(softmax(&logits, 1.0)?[EOS as usize]);
    }
    Ok(out)
}

/// Mean P(EOS) at offsets `-before..=after` of the reference boundary.
/// Offsets up to 0 are teacher-forced on the reference; positive offsets
/// continue greedily with EOS excluded.
pub fn eos_profile(
    model: &Backbone,
    hook: Option<&dyn RowHook>,
    cases: &[CaseRecord],
    before: usize,
    after: usize,
    decay_rate: f64,
) -> Result<EosProfile> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no cases for the EOS profile".into()));
    }
    let one = |c: &CaseRecord| case_profile(model, hook, c, before, after, decay_rate);
    #[cfg(feature = "parallel")]
    let per_case: Vec<Result<Vec<Option<f64>>>> = {
        use rayon::prelude::*;
        cases.par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_case: Vec<Result<Vec<Option<f64>>>> = cases.iter().map(one).collect();
    let width = before + 1 + after;
    let mut sums = vec![0.0; width];
    let mut counts = vec![0usize; width];
    for r in per_case {
        for (i, v) in r?.into_iter().enumerate() {
            if let Some(p) = v {
                sums[i] += p;
                counts[i] += 1;
            }
        }
    }
    Ok(EosProfile {
        offsets: (0..width).map(|i| i as i64 - before as i64).collect(),
        mean_prob: sums.iter().zip(&counts).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect(),
        counts,
    })
}
