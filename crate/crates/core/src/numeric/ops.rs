//! Scalar-vector kernels shared by the losses, the tape and the evaluators.
//!
//! Every log-probability goes through a max-shifted log-sum-exp.

use crate::error::{Error, Result};

fn check_finite(v: &[f64], context: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: context.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(())
}

/// `log Σ exp(v_i / T)` without overflow.
pub fn log_sum_exp(v: &[f64], temperature: f64) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = v.iter().map(|x| ((x - max) / temperature).exp()).sum();
    max / temperature + s.ln()
}

/// Log-softmax of `v / T` written into `out`. Unchecked; callers validate.
pub fn log_softmax_into(v: &[f64], temperature: f64, out: &mut [f64]) {
    let lse = log_sum_exp(v, temperature);
    for (o, x) in out.iter_mut().zip(v) {
        *o = x / temperature - lse;
    }
}

/// Softmax of `v / T` written into `out`. Unchecked; callers validate.
pub fn softmax_into(v: &[f64], temperature: f64, out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(v) {
        *o = ((x - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    check_finite(v, "softmax input")?;
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, temperature, &mut out);
    Ok(out)
}

pub fn log_softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    check_finite(v, "log_softmax input")?;
    if v.is_empty() {
        return Err(Error::InvalidArgument(
            "log_softmax of an empty vector".into(),
        ));
    }
    let mut out = vec![0.0; v.len()];
    log_softmax_into(v, temperature, &mut out);
    Ok(out)
}

/// `-log softmax(logits / T)[target]`.
///
/// The distillation objective always calls this at `T = 1`; the distillation
/// temperature only enters the KL term.
pub fn cross_entropy(logits: &[f64], target: usize, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    check_finite(logits, "cross_entropy logits")?;
    Ok(log_sum_exp(logits, temperature) - logits[target] / temperature)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries, descending by value; ties by index.
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k.min(v.len()));
    idx
}

/// Tanh-approximated Gaussian-error linear unit.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);

        let e = std::f64::consts::E;
        let p = softmax(&[2.0, 0.0], 2.0).unwrap();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4);
        assert!((p[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let p = softmax(&[1e300, 1e300 - 1.0, -1e300], 1.0).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[0.0, f64::NAN], 1.0).is_err());
        assert!(softmax(&[0.0, f64::INFINITY], 1.0).is_err());
        assert!(softmax(&[0.0, 1.0], 0.0).is_err());
        assert!(softmax(&[0.0, 1.0], -1.0).is_err());
        match softmax(&[1.0, 2.0, f64::NAN], 1.0) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&[0.0; 4], 2, 1.0).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);
        assert!((ce - 1.3863).abs() < 1e-4);

        let ce = cross_entropy(&[30.0, 0.0, 0.0], 0, 1.0).unwrap();
        assert!(ce < 1e-12);

        let e = std::f64::consts::E;
        let ce = cross_entropy(&[1.0, 0.0], 1, 1.0).unwrap();
        assert!((ce - (1.0 + e).ln()).abs() < 1e-15);
        assert!((ce - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        assert!(cross_entropy(&[0.0, 0.0], 2, 1.0).is_err());
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn top_k_orders_descending() {
        assert_eq!(top_k_indices(&[0.1, 3.0, -1.0, 3.0, 2.0], 3), vec![1, 3, 4]);
        assert_eq!(argmax(&[1.0, 5.0, 5.0]), 1);
    }
}
