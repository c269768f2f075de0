//! Attention-adjusted token proxy for forward cost.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

/// `proxy(n) = lin·n + quad·n²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub lin: f64,
    pub quad: f64,
}

impl CostModel {
    pub fn new(lin: f64, quad: f64) -> Result<Self> {
        if !(lin >= 0.0 && quad >= 0.0) || lin + quad == 0.0 {
            return Err(Error::InvalidArgument("cost coefficients must be nonnegative and not both zero".into()));
        }
        Ok(CostModel { lin, quad })
    }

    /// Per-token matmul FLOPs for `lin`; score and value mixing per token pair
    /// for `quad`.
    pub fn for_backbone(c: &BackboneConfig) -> Self {
        let (d, f, l) = (c.d_model as f64, c.d_ff as f64, c.n_layers as f64);
        CostModel {
            lin: 2.0 * l * (4.0 * d * d + 2.0 * d * f) + 2.0 * d * c.vocab_size as f64,
            quad: 2.0 * l * d,
        }
    }

    pub fn proxy(&self, n: usize) -> f64 {
        let n = n as f64;
        self.lin * n + self.quad * n * n
    }

    /// Cost of an `n`-token forward relative to an `n0`-token one.
    pub fn ratio(&self, n: usize, n0: usize) -> Result<f64> {
        if n == 0 || n0 == 0 {
            return Err(Error::InvalidArgument("token counts must be positive".into()));
        }
        if n == n0 {
            return Ok(1.0);
        }
        Ok(self.proxy(n) / self.proxy(n0))
    }
}

fn sse(c: f64, n0: f64, points: &[(usize, f64)]) -> f64 {
    points
        .iter()
        .map(|&(n, r)| {
            let n = n as f64;
            let pred = (c * n + n * n) / (c * n0 + n0 * n0);
            (pred - r) * (pred - r)
        })
        .sum()
}

/// Least-squares fit of the single ratio `lin/quad` to observed cost ratios
/// `(n, ratio)` relative to `n0`. Searches `log10(lin/quad)` in `[0, 9]`.
pub fn fit_lin_quad_ratio(points: &[(usize, f64)], n0: usize) -> Result<f64> {
    if points.is_empty() || n0 == 0 {
        return Err(Error::InvalidArgument("need observations and a positive baseline".into()));
    }
    let n0 = n0 as f64;
    let f = |x: f64| sse(10f64.powf(x), n0, points);
    // coarse grid, then golden-section refinement around the best cell
    let grid = 900;
    let best = (0..=grid)
        .map(|i| 9.0 * i as f64 / grid as f64)
        .fold((0.0, f64::INFINITY), |b, x| {
            let v = f(x);
            if v < b.1 {
                (x, v)
            } else {
                b
            }
        })
        .0;
    let (mut a, mut b) = ((best - 0.01).max(0.0), (best + 0.01).min(9.0));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let x1 = b - g * (b - a);
        let x2 = a + g * (b - a);
        if f(x1) < f(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    Ok(10f64.powf(0.5 * (a + b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_limit_and_identity() {
        let m = CostModel::new(3.0, 0.0).unwrap();
        assert!((m.ratio(300, 100).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(CostModel::new(1.0, 1.0).unwrap().ratio(77, 77).unwrap(), 1.0);
        assert!(CostModel::new(0.0, 0.0).is_err());
    }

    #[test]
    fn fit_recovers_planted_ratio() {
        let truth = CostModel::new(5000.0, 1.0).unwrap();
        let pts: Vec<(usize, f64)> = [200, 500, 900, 2000].iter().map(|&n| (n, truth.ratio(n, 200).unwrap())).collect();
        let c = fit_lin_quad_ratio(&pts, 200).unwrap();
        assert!((c / 5000.0 - 1.0).abs() < 1e-6, "{c}");
    }
}
