//! MLP block `W1 gelu(W2 x + b)`; no measure dependence.

use super::activation::{gelu, gelu_prime};
use crate::linalg::Mat;

pub(crate) fn preactivation(w2: &Mat, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = w2.mul_vec(x);
    h.iter_mut().zip(b).for_each(|(h, b)| *h += b);
    h
}

pub fn velocity(w1: &Mat, w2: &Mat, b: &[f64], x: &[f64]) -> Vec<f64> {
    let act: Vec<f64> = preactivation(w2, b, x).into_iter().map(gelu).collect();
    w1.mul_vec(&act)
}

/// `W1 diag(gelu'(W2 x + b)) W2`.
pub fn jac_x(w1: &Mat, w2: &Mat, b: &[f64], x: &[f64]) -> Mat {
    let slopes: Vec<f64> = preactivation(w2, b, x).into_iter().map(gelu_prime).collect();
    let d = slopes.len();
    let mut scaled = w2.clone();
    for (i, s) in slopes.iter().enumerate() {
        for j in 0..scaled.cols() {
            scaled.set(i, j, s * w2.get(i, j));
        }
    }
    debug_assert_eq!(w1.cols(), d);
    w1.matmul(&scaled)
}

/// `(dW1, dW2, db) = (p gelu(h)^T, (gelu'(h) . W1^T p) x^T, gelu'(h) . W1^T p)`.
pub fn theta_transpose_apply(w1: &Mat, w2: &Mat, b: &[f64], x: &[f64], p: &[f64]) -> (Mat, Mat, Vec<f64>) {
    let h = preactivation(w2, b, x);
    let act: Vec<f64> = h.iter().map(|&t| gelu(t)).collect();
    let back: Vec<f64> = w1
        .tr_mul_vec(p)
        .into_iter()
        .zip(&h)
        .map(|(g, &t)| g * gelu_prime(t))
        .collect();
    (Mat::outer(p, &act), Mat::outer(&back, x), back)
}
