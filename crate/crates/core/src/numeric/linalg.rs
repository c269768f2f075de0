//! Small dense symmetric eigen-solver, enough for rank checks.

use super::matrix::Matrix;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "square matrix required");
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        let diag: f64 = (0..n).map(|i| m.get(i, i).powi(2)).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m.get(p, p), m.get(q, q));
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Singular values of `a` (rows are samples), descending.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let gram = a.transpose().matmul(a).expect("gram shape");
    symmetric_eigenvalues(&gram).into_iter().map(|v| v.max(0.0).sqrt()).collect()
}

/// Number of singular values above `rel_tol · σ_max`.
pub fn numerical_rank(a: &Matrix, rel_tol: f64) -> usize {
    let s = singular_values(a);
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * top).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_of_known_matrix() {
        let a = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let ev = symmetric_eigenvalues(&a);
        assert!((ev[0] - 3.0).abs() < 1e-12 && (ev[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_of_outer_products() {
        // rows are combinations of two fixed vectors
        let u = [1.0, 2.0, 0.0, -1.0, 3.0];
        let v = [0.5, -1.0, 2.0, 0.0, 1.0];
        let data: Vec<f64> = (0..10)
            .flat_map(|i| {
                let (a, b) = (i as f64 * 0.3 - 1.0, (i * i) as f64 * 0.1);
                (0..5).map(move |j| a * u[j] + b * v[j])
            })
            .collect();
        let m = Matrix::from_vec(10, 5, data).unwrap();
        assert_eq!(numerical_rank(&m, 1e-8), 2);
    }
}
