//! One-dimensional W1 by quantile coupling and its sliced average.

use rand_distr::{Distribution, StandardNormal};

use crate::ensemble::Ensemble;
use crate::error::{check_dim, CfmError, Result};
use crate::rng::RngHandle;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `int |F_a^{-1} - F_b^{-1}|` for uniform weights, merging the two sorted
/// samples on integer mass units.
pub fn w1_1d(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "w1_1d needs nonempty samples");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as u64, b.len() as u64);
    let total = na / gcd(na, nb) * nb;
    let (ua, ub) = (total / na, total / nb);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (ua, ub);
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let t = ra.min(rb);
        acc += t as f64 * (a[i] - b[j]).abs();
        ra -= t;
        rb -= t;
        if ra == 0 {
            i += 1;
            ra = ua;
        }
        if rb == 0 {
            j += 1;
            rb = ub;
        }
    }
    acc / total as f64
}

pub const DEFAULT_PROJECTIONS: usize = 128;

/// Mean of the 1D W1 distances of the projections onto `projections` random
/// unit directions. A lower bound for the exact W1.
pub fn w1_sliced(a: &Ensemble, b: &Ensemble, projections: usize, rng: &RngHandle) -> Result<f64> {
    if projections == 0 {
        return Err(CfmError::InvalidArgument("projections must be >= 1".into()));
    }
    if a.is_empty() || b.is_empty() {
        return Err(CfmError::EmptyEnsemble);
    }
    check_dim(a.dim(), b.dim(), "second ensemble")?;
    let d = a.dim();
    let mut r = rng.rng();
    let mut total = 0.0;
    for _ in 0..projections {
        let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = crate::linalg::l2_norm(&u);
        u.iter_mut().for_each(|c| *c /= norm);
        total += w1_1d(&a.project(&u), &b.project(&u));
    }
    Ok(total / projections as f64)
}
