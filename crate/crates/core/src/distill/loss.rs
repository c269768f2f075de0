//! The distillation objective: top-K renormalized KL and weighted CE.

use crate::error::{Error, Result};
use crate::numeric::ops::log_sum_exp;
use crate::numeric::{CustomOp, GradTape, Matrix, NodeId};

/// Log-probabilities of `logits` restricted to `ids`, at temperature `t`.
fn restricted_log_probs(logits: impl Iterator<Item = f64>, t: f64) -> Vec<f64> {
    let v: Vec<f64> = logits.collect();
    let lse = log_sum_exp(&v, t);
    v.iter().map(|x| x / t - lse).collect()
}

/// `KL(p^T_K ‖ p^S_K)` over the teacher's top-K support, both sides
/// temperature-scaled and renormalized on that support. Computed in log
/// space, so no probability ever underflows to zero.
pub fn topk_kl(ids: &[u32], teacher_logits: &[f32], student_logits: &[f64], temperature: f64) -> f64 {
    let lp = restricted_log_probs(teacher_logits.iter().map(|&v| v as f64), temperature);
    let lq = restricted_log_probs(ids.iter().map(|&i| student_logits[i as usize]), temperature);
    let kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
    kl.max(0.0)
}

/// `Σ w·CE / Σ w` over rows of plain logits.
pub fn weighted_ce(logits: &[Vec<f64>], targets: &[usize], weights: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() || targets.len() != weights.len() {
        return Err(Error::shape(
            "weighted_ce",
            format!("{} rows", logits.len()),
            format!("{} targets, {} weights", targets.len(), weights.len()),
        ));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("sum of CE weights is zero".into()));
    }
    let mut s = 0.0;
    for ((row, &t), &w) in logits.iter().zip(targets).zip(weights) {
        s += w * (log_sum_exp(row, 1.0) - row[t]);
    }
    Ok(s / total)
}

struct TopKKlOp {
    row_offset: usize,
    ids: Vec<Vec<u32>>,
    /// Teacher restricted probabilities.
    p: Vec<Vec<f64>>,
    temperature: f64,
}

impl CustomOp for TopKKlOp {
    fn backward(&self, g: &Matrix, inputs: &[&Matrix], needs: &[bool]) -> Vec<Option<Matrix>> {
        if !needs[0] {
            return vec![None];
        }
        let logits = inputs[0];
        let n = self.ids.len() as f64;
        let coef = g.data()[0] / (n * self.temperature);
        let mut out = Matrix::zeros(logits.rows(), logits.cols());
        for (t, (ids, p)) in self.ids.iter().zip(&self.p).enumerate() {
            let row = logits.row(self.row_offset + t);
            let lq = restricted_log_probs(ids.iter().map(|&i| row[i as usize]), self.temperature);
            let o = out.row_mut(self.row_offset + t);
            for ((&i, pi), lqi) in ids.iter().zip(p).zip(&lq) {
                o[i as usize] += coef * (lqi.exp() - pi);
            }
        }
        vec![Some(out)]
    }
}

/// Mean top-K KL over `ids.len()` consecutive logit rows starting at
/// `row_offset`, as a scalar node.
pub fn topk_kl_node(
    tape: &mut GradTape<'_>,
    logits: NodeId,
    row_offset: usize,
    ids: &[Vec<u32>],
    teacher_logits: &[Vec<f32>],
    temperature: f64,
) -> Result<NodeId> {
    let l = tape.value(logits);
    if row_offset + ids.len() > l.rows() || ids.len() != teacher_logits.len() || ids.is_empty() {
        return Err(Error::shape(
            "topk_kl",
            format!("{} cached positions within {} rows", ids.len(), l.rows()),
            format!("offset {row_offset}, {} teacher rows", teacher_logits.len()),
        ));
    }
    let mut total = 0.0;
    let mut p = Vec::with_capacity(ids.len());
    for (t, (id, tl)) in ids.iter().zip(teacher_logits).enumerate() {
        total += topk_kl(id, tl, l.row(row_offset + t), temperature);
        p.push(
            restricted_log_probs(tl.iter().map(|&v| v as f64), temperature)
                .into_iter()
                .map(f64::exp)
                .collect(),
        );
    }
    let value = total / ids.len() as f64;
    Ok(tape.custom(
        &[logits],
        Matrix::row_vector(vec![value]),
        Box::new(TopKKlOp {
            row_offset,
            ids: ids.to_vec(),
            p,
            temperature,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::grad_check;

    #[test]
    fn identical_distributions_have_zero_kl() {
        let s = [1.0, -0.5, 2.0, 0.3];
        let t: Vec<f32> = [2.0f32, 1.0, 0.3].to_vec();
        let ids = [2u32, 0, 3];
        let student: Vec<f64> = s.iter().map(|&v| v as f32 as f64).collect();
        assert!(topk_kl(&ids, &t, &student, 2.0) < 1e-12);
    }

    #[test]
    fn two_way_example() {
        // teacher restricted [0.75, 0.25]: logit gap ln 3 at T = 1
        let t = [3f32.ln(), 0.0];
        let kl = topk_kl(&[0, 1], &t, &[0.0, 0.0, 5.0], 1.0);
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - expected).abs() < 1e-6, "{kl}");
    }

    #[test]
    fn weighted_ce_examples() {
        // rows whose CE is exactly ln 2 and ln 3 etc. are awkward; use
        // uniform logits where CE = ln V
        let rows = vec![vec![0.0; 2], vec![0.0; 4], vec![0.0; 8]];
        let ce = [2f64.ln(), 4f64.ln(), 8f64.ln()];
        let w = weighted_ce(&rows, &[0, 1, 2], &[1.0, 8.0, 5.0]).unwrap();
        let expected = (ce[0] + 8.0 * ce[1] + 5.0 * ce[2]) / 14.0;
        assert!((w - expected).abs() < 1e-12);
        assert!(weighted_ce(&rows, &[0, 1, 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn kl_node_gradient() {
        let ids = vec![vec![1u32, 3, 0], vec![2u32, 0, 1]];
        let tl = vec![vec![1.5f32, 0.2, -0.7], vec![0.9f32, 0.8, -1.0]];
        let x0: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4).collect();
        let rep = grad_check(
            |x| {
                let m = Matrix::from_vec(3, 4, x.to_vec()).unwrap();
                let mut tape = GradTape::new();
                let l = tape.param(&m);
                let loss = topk_kl_node(&mut tape, l, 1, &ids, &tl, 2.0).unwrap();
                tape.backward(loss).unwrap();
                (tape.scalar(loss), tape.grad(l).unwrap().data().to_vec())
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
    }
}
