//! Independent reference computations used by tests and the self-test suite.

mod ssp;

pub use ssp::w1_ssp;

use crate::ensemble::Ensemble;
use crate::linalg::{dist, Mat};

/// `exp(A)` by scaling and squaring with a degree-18 Taylor polynomial.
pub fn expm(a: &Mat) -> Mat {
    let n = a.rows();
    let norm = a.frobenius_norm();
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let mut b = a.clone();
    b.scale_mut(scale);
    let mut result = Mat::identity(n);
    let mut term = Mat::identity(n);
    for k in 1..=18 {
        term = term.matmul(&b);
        term.scale_mut(1.0 / k as f64);
        result = result.add(&term);
    }
    for _ in 0..squarings {
        result = result.matmul(&result);
    }
    result
}

/// Exact W1 between equal-size uniform ensembles by enumerating every
/// permutation coupling. Factorial cost; intended for `n <= 8`.
pub fn w1_permutation(a: &Ensemble, b: &Ensemble) -> f64 {
    assert_eq!(a.len(), b.len(), "permutation oracle needs equal sizes");
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = dist(a.particle(i), b.particle(j));
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &cost, n, &mut best);
    best / n as f64
}

fn permute(perm: &mut [usize], k: usize, cost: &[f64], n: usize, best: &mut f64) {
    if k == n {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        if total < *best {
            *best = total;
        }
        return;
    }
    for i in k..n {
        perm.swap(k, i);
        permute(perm, k + 1, cost, n, best);
        perm.swap(k, i);
    }
}

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_diagonal_and_rotation() {
        let d = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, -2.0]]);
        let e = expm(&d);
        assert!((e.get(0, 0) - 1f64.exp()).abs() < 1e-14);
        assert!((e.get(1, 1) - (-2f64).exp()).abs() < 1e-15);
        let t = 0.7;
        let r = expm(&Mat::from_rows(&[vec![0.0, -t], vec![t, 0.0]]));
        assert!((r.get(0, 0) - t.cos()).abs() < 1e-15);
        assert!((r.get(1, 0) - t.sin()).abs() < 1e-15);
    }

    #[test]
    fn permutation_oracle_on_line() {
        let a = Ensemble::from_points(&[vec![0.0], vec![1.0]]).unwrap();
        let b = Ensemble::from_points(&[vec![1.5], vec![0.5]]).unwrap();
        assert!((w1_permutation(&a, &b) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(|x| x * x * x, 2.0, 1e-3);
        assert!((g - 12.0).abs() < 1e-5);
    }
}
