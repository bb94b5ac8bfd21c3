//! Wasserstein-1 distances between empirical measures and rate fitting.

mod exact;
mod rate;
mod sliced;

pub use exact::{w1_exact, TransportPlan, W1_SIZE_CAP};
pub use rate::{fit_rate, fit_rate_of_means, mean_by_n, RateFit};
pub use sliced::{w1_1d, w1_sliced, DEFAULT_PROJECTIONS};

/// Exact W1 distance only.
pub fn w1(a: &crate::Ensemble, b: &crate::Ensemble) -> crate::Result<f64> {
    w1_exact(a, b).map(|r| r.0)
}
