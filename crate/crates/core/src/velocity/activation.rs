//! Exact (erf) GELU and its derivatives.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

#[inline]
fn std_normal_cdf(t: f64) -> f64 {
    0.5 * (1.0 + libm::erf(t * FRAC_1_SQRT_2))
}

#[inline]
fn std_normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

/// `t * Phi(t)`.
#[inline]
pub fn gelu(t: f64) -> f64 {
    t * std_normal_cdf(t)
}

/// `Phi(t) + t phi(t)`.
#[inline]
pub fn gelu_prime(t: f64) -> f64 {
    std_normal_cdf(t) + t * std_normal_pdf(t)
}

/// `phi(t) (2 - t^2)`.
#[inline]
pub fn gelu_second(t: f64) -> f64 {
    std_normal_pdf(t) * (2.0 - t * t)
}

/// Bound `alpha` with `|gelu(t)| <= alpha(|t|+1)`, `|gelu'| <= alpha`, `|gelu''| <= alpha`.
///
/// `gelu'` peaks at `t = sqrt(2)` (where `gelu'' = 0`), with value
/// `Phi(sqrt 2) + sqrt(2) phi(sqrt 2) ~ 1.1289`; its minimum is about `-0.129` and
/// `|gelu''| <= 2 phi(0) ~ 0.798`, so the first-derivative peak dominates.
pub fn gelu_alpha() -> f64 {
    gelu_prime(SQRT_2)
}
