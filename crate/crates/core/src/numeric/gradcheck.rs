use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compare an analytic gradient against central finite differences.
///
/// `f` returns the function value and its analytic gradient at the given
/// point. The analytic gradient is taken once at `params`; each coordinate is
/// then perturbed by `±epsilon`.
pub fn grad_check<F>(mut f: F, params: &[f64], epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let (_, analytic) = f(params);
    if analytic.len() != params.len() {
        return Err(Error::shape("grad_check", params.len(), analytic.len()));
    }
    if let Some(index) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "analytic gradient".into(),
            index,
        });
    }
    let mut x = params.to_vec();
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (fp, _) = f(&x);
        x[i] = orig - epsilon;
        let (fm, _) = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * epsilon);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                context: "finite-difference gradient".into(),
                index: i,
            });
        }
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        coordinates: x.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::ops::{cross_entropy, softmax};

    #[test]
    fn square_at_three() {
        let r = grad_check(|x| (x[0] * x[0], vec![2.0 * x[0]]), &[3.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let logits = [0.3, -1.2, 2.2, 0.05, -0.4, 1.1];
        let target = 3;
        let r = grad_check(
            |z| {
                let ce = cross_entropy(z, target, 1.0).unwrap();
                let mut g = softmax(z, 1.0).unwrap();
                g[target] -= 1.0;
                (ce, g)
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn non_finite_gradient_is_reported_with_index() {
        let err = grad_check(|x| (x[0], vec![1.0, f64::NAN]), &[1.0, 2.0], 1e-5).unwrap_err();
        match err {
            Error::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let r = grad_check(|x| (x[0] * x[0], vec![3.0 * x[0]]), &[2.0], 1e-5).unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
