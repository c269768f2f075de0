//! Loss nodes for the tape.

use super::matrix::Matrix;
use super::ops::{log_softmax_into, softmax_into};
use super::tape::{CustomOp, GradTape, NodeId};
use crate::error::{Error, Result};

struct WeightedCe {
    targets: Vec<usize>,
    coef: Vec<f64>,
}

impl CustomOp for WeightedCe {
    fn backward(&self, g: &Matrix, inputs: &[&Matrix], needs: &[bool]) -> Vec<Option<Matrix>> {
        if !needs[0] {
            return vec![None];
        }
        let logits = inputs[0];
        let g = g.data()[0];
        let mut out = Matrix::zeros(logits.rows(), logits.cols());
        for (r, (&t, &c)) in self.targets.iter().zip(&self.coef).enumerate() {
            if c == 0.0 {
                continue;
            }
            let row = out.row_mut(r);
            softmax_into(logits.row(r), 1.0, row);
            row[t] -= 1.0;
            row.iter_mut().for_each(|v| *v *= g * c);
        }
        vec![Some(out)]
    }
}

/// Per-row cross entropy at temperature 1.
pub fn row_cross_entropies(logits: &Matrix, targets: &[usize]) -> Vec<f64> {
    let mut buf = vec![0.0; logits.cols()];
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            log_softmax_into(logits.row(r), 1.0, &mut buf);
            -buf[t]
        })
        .collect()
}

/// `Σ wᵣ CE(logitsᵣ, targetᵣ) / Σ wᵣ` as a scalar node.
pub fn weighted_ce(tape: &mut GradTape<'_>, logits: NodeId, targets: &[usize], weights: &[f64]) -> Result<NodeId> {
    let l = tape.value(logits);
    if targets.len() != l.rows() || weights.len() != l.rows() {
        return Err(Error::shape(
            "weighted_ce",
            format!("{} targets and weights", l.rows()),
            format!("{} / {}", targets.len(), weights.len()),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= l.cols()) {
        return Err(Error::InvalidArgument(format!("target {t} outside vocabulary of {}", l.cols())));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) || total <= 0.0 {
        return Err(Error::InvalidArgument("weights must be nonnegative with a positive sum".into()));
    }
    let ce = row_cross_entropies(l, targets);
    let value: f64 = ce.iter().zip(weights).map(|(c, w)| c * w).sum::<f64>() / total;
    let coef = weights.iter().map(|w| w / total).collect();
    Ok(tape.custom(
        &[logits],
        Matrix::row_vector(vec![value]),
        Box::new(WeightedCe {
            targets: targets.to_vec(),
            coef,
        }),
    ))
}
