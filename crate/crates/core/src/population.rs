//! Population laws for contexts and tokens, all supported in a closed ball `B_R(0)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::Ensemble;
use crate::error::{check_dim, CfmError, Result};
use crate::linalg::l2_norm;
use crate::rng::RngHandle;

/// Total rejections tolerated by one sampler call before giving up.
pub const MAX_REJECTIONS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub enum PopulationKind {
    UniformBall,
    /// Isotropic `N(0, sigma^2 I)` conditioned on the ball.
    TruncatedGaussian { sigma: f64 },
    /// Uniformly chosen center plus `N(0, spread^2 I)` noise, conditioned on the ball.
    MixtureOfPointClusters { centers: Vec<Vec<f64>>, spread: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub kind: PopulationKind,
    pub dim: usize,
    pub radius: f64,
}

impl PopulationSpec {
    pub fn uniform_ball(dim: usize, radius: f64) -> Self {
        Self {
            kind: PopulationKind::UniformBall,
            dim,
            radius,
        }
    }

    pub fn truncated_gaussian(dim: usize, sigma: f64, radius: f64) -> Self {
        Self {
            kind: PopulationKind::TruncatedGaussian { sigma },
            dim,
            radius,
        }
    }

    pub fn mixture(centers: Vec<Vec<f64>>, spread: f64, radius: f64) -> Self {
        let dim = centers.first().map_or(0, Vec::len);
        Self {
            kind: PopulationKind::MixtureOfPointClusters { centers, spread },
            dim,
            radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(CfmError::InvalidArgument("population dimension must be >= 1".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(CfmError::InvalidArgument(format!("radius {} must be positive", self.radius)));
        }
        match &self.kind {
            PopulationKind::UniformBall => {}
            PopulationKind::TruncatedGaussian { sigma } => {
                if !(*sigma > 0.0) {
                    return Err(CfmError::InvalidArgument("sigma must be positive".into()));
                }
            }
            PopulationKind::MixtureOfPointClusters { centers, spread } => {
                if centers.is_empty() {
                    return Err(CfmError::InvalidArgument("mixture needs at least one center".into()));
                }
                for c in centers {
                    check_dim(self.dim, c.len(), "mixture center")?;
                }
                if !(*spread >= 0.0) {
                    return Err(CfmError::InvalidArgument("spread must be >= 0".into()));
                }
            }
        }
        Ok(())
    }

    fn candidate<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match &self.kind {
            PopulationKind::UniformBall => {
                for v in out.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let n = l2_norm(out);
                let r = self.radius * rng.random::<f64>().powf(1.0 / self.dim as f64);
                let s = if n > 0.0 { r / n } else { 0.0 };
                out.iter_mut().for_each(|v| *v *= s);
            }
            PopulationKind::TruncatedGaussian { sigma } => {
                for v in out.iter_mut() {
                    *v = sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            PopulationKind::MixtureOfPointClusters { centers, spread } => {
                let c = &centers[rng.random_range(0..centers.len())];
                for (v, ci) in out.iter_mut().zip(c) {
                    *v = if *spread > 0.0 {
                        ci + spread * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        *ci
                    };
                }
            }
        }
    }

    /// Draw points until `count` land inside the ball.
    fn draw_into<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.validate()?;
        let d = self.dim;
        let mut coords = vec![0.0; count * d];
        let mut rejections = 0usize;
        for i in 0..count {
            let slot = &mut coords[i * d..(i + 1) * d];
            loop {
                self.candidate(rng, slot);
                if l2_norm(slot) <= self.radius {
                    break;
                }
                rejections += 1;
                if rejections > MAX_REJECTIONS {
                    return Err(CfmError::SamplerExhausted {
                        limit: MAX_REJECTIONS,
                        spec: format!("{:?}", self.kind),
                    });
                }
            }
        }
        Ok(coords)
    }
}

/// `n` i.i.d. draws from `spec`, driven by the stream `rng`.
pub fn sample_ensemble(spec: &PopulationSpec, n: usize, rng: &RngHandle) -> Result<Ensemble> {
    if n == 0 {
        return Err(CfmError::EmptyEnsemble);
    }
    let mut r = rng.rng();
    let coords = spec.draw_into(n, &mut r)?;
    Ok(Ensemble::from_raw(spec.dim, coords))
}

/// Single draw from `spec`.
pub fn sample_point(spec: &PopulationSpec, rng: &RngHandle) -> Result<Vec<f64>> {
    let mut r = rng.rng();
    spec.draw_into(1, &mut r)
}

/// Context attached to one training observation.
#[derive(Debug, Clone, PartialEq)]
pub enum Context {
    /// Materialize by sampling from the population at use time.
    Population(PopulationSpec),
    Explicit(Ensemble),
}

/// One observation `(x0, mu0, y0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x0: Vec<f64>,
    pub context: Context,
    pub y0: Vec<f64>,
}

impl Sample {
    /// Concrete context ensemble; population contexts draw `n` particles from `rng`.
    pub fn materialize(&self, n: usize, rng: &RngHandle) -> Result<Ensemble> {
        match &self.context {
            Context::Population(spec) => sample_ensemble(spec, n, rng),
            Context::Explicit(e) => Ok(e.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_uniform_draw_is_in_ball() {
        let spec = PopulationSpec::uniform_ball(3, 1.0);
        let e = sample_ensemble(&spec, 1, &RngHandle::new(5)).unwrap();
        assert_eq!(e.len(), 1);
        assert!(e.max_norm() <= 1.0);
    }

    #[test]
    fn degenerate_mixture_repeats_center() {
        let c = vec![0.2, -0.3, 0.1];
        let spec = PopulationSpec::mixture(vec![c.clone()], 0.0, 1.0);
        let e = sample_ensemble(&spec, 17, &RngHandle::new(9)).unwrap();
        for p in e.iter() {
            assert_eq!(p, c.as_slice());
        }
    }

    #[test]
    fn uniform_ball_mean_is_near_origin() {
        // per-coordinate variance R^2/(d+2) = 0.8; sd of mean at 1e5 draws ~ 0.0028
        let spec = PopulationSpec::uniform_ball(3, 2.0);
        let e = sample_ensemble(&spec, 100_000, &RngHandle::new(11)).unwrap();
        for m in e.mean() {
            assert!(m.abs() < 0.02, "mean coordinate {m}");
        }
        assert!(e.max_norm() <= 2.0);
    }

    #[test]
    fn truncation_enforces_support() {
        let spec = PopulationSpec::truncated_gaussian(2, 3.0, 1.0);
        let e = sample_ensemble(&spec, 500, &RngHandle::new(2)).unwrap();
        assert!(e.max_norm() <= 1.0);
    }

    #[test]
    fn impossible_mixture_fails_loudly() {
        let spec = PopulationSpec::mixture(vec![vec![5.0, 0.0]], 0.0, 1.0);
        let err = sample_ensemble(&spec, 1, &RngHandle::new(2)).unwrap_err();
        assert!(matches!(err, CfmError::SamplerExhausted { .. }));
    }

    #[test]
    fn zero_particles_is_an_error() {
        let spec = PopulationSpec::uniform_ball(2, 1.0);
        assert_eq!(sample_ensemble(&spec, 0, &RngHandle::new(1)), Err(CfmError::EmptyEnsemble));
    }
}
