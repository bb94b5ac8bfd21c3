//! Log-log least squares for convergence exponents.

use serde::Serialize;

use crate::error::{CfmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// OLS standard error of the slope; zero with three points on a line.
    pub slope_std_error: f64,
    /// `(ln n, ln value)`.
    pub points: Vec<(f64, f64)>,
}

/// OLS fit of `ln value = intercept + slope * ln n`.
pub fn fit_rate(points: &[(usize, f64)]) -> Result<RateFit> {
    let mut ns: Vec<usize> = points.iter().map(|p| p.0).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 3 {
        return Err(CfmError::InvalidArgument(format!(
            "rate fit needs at least 3 distinct n, got {}",
            ns.len()
        )));
    }
    if let Some(&(n, v)) = points.iter().find(|p| !(p.1 > 0.0) || !p.1.is_finite()) {
        return Err(CfmError::InvalidArgument(format!(
            "rate fit needs positive values; got {v} at n = {n} (degenerate experiment?)"
        )));
    }
    if ns[0] == 0 {
        return Err(CfmError::InvalidArgument("rate fit needs n >= 1".into()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(n, v)| ((n as f64).ln(), v.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = logs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 || ss_res == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    let slope_std_error = if logs.len() > 2 {
        (ss_res / (k - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        slope_std_error,
        points: logs,
    })
}

/// Per-n mean and standard error of the mean over repeats, in order of first
/// appearance of each n.
pub fn mean_by_n(samples: &[(usize, f64)]) -> Vec<(usize, f64, f64)> {
    let mut order: Vec<usize> = Vec::new();
    for &(n, _) in samples {
        if !order.contains(&n) {
            order.push(n);
        }
    }
    order
        .into_iter()
        .map(|n| {
            let vals: Vec<f64> = samples.iter().filter(|s| s.0 == n).map(|s| s.1).collect();
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let se = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
            } else {
                0.0
            };
            (n, mean, se)
        })
        .collect()
}

/// Average repeats per n, then fit.
pub fn fit_rate_of_means(samples: &[(usize, f64)]) -> Result<(RateFit, Vec<(usize, f64, f64)>)> {
    let means = mean_by_n(samples);
    let pts: Vec<(usize, f64)> = means.iter().map(|&(n, m, _)| (n, m)).collect();
    Ok((fit_rate(&pts)?, means))
}
