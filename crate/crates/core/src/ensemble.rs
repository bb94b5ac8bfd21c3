use crate::error::{check_dim, CfmError, Result};
use crate::linalg::{all_finite, l2_norm};

/// Equal-weight empirical measure `(1/n) sum_i delta_{z_i}` in `R^d`.
///
/// Particles are stored contiguously, particle `i` at `coords[i*d..(i+1)*d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    dim: usize,
    coords: Vec<f64>,
}

impl Ensemble {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(CfmError::InvalidArgument("dimension must be >= 1".into()));
        }
        if coords.is_empty() {
            return Err(CfmError::EmptyEnsemble);
        }
        if coords.len() % dim != 0 {
            return Err(CfmError::InvalidArgument(format!(
                "{} coordinates do not divide into dimension {dim}",
                coords.len()
            )));
        }
        if !all_finite(&coords) {
            return Err(CfmError::InvalidArgument("non-finite particle".into()));
        }
        Ok(Self { dim, coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().ok_or(CfmError::EmptyEnsemble)?.len();
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            check_dim(dim, p.len(), "ensemble point")?;
            coords.extend_from_slice(p);
        }
        Self::new(dim, coords)
    }

    /// Construction without the finiteness scan; used by the integrators which
    /// check states themselves.
    pub(crate) fn from_raw(dim: usize, coords: Vec<f64>) -> Self {
        debug_assert!(dim > 0 && !coords.is_empty() && coords.len() % dim == 0);
        Self { dim, coords }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn particle(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.iter() {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn max_norm(&self) -> f64 {
        self.iter().map(l2_norm).fold(0.0, f64::max)
    }

    /// Ensemble whose particle `i` is `self.particle(perm[i])`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(CfmError::InvalidArgument("permutation length".into()));
        }
        let mut coords = Vec::with_capacity(self.coords.len());
        for &j in perm {
            coords.extend_from_slice(self.particle(j));
        }
        Ok(Self::from_raw(self.dim, coords))
    }

    pub fn translated(&self, shift: &[f64]) -> Result<Self> {
        check_dim(self.dim, shift.len(), "translation")?;
        let mut coords = self.coords.clone();
        for chunk in coords.chunks_exact_mut(self.dim) {
            for (c, s) in chunk.iter_mut().zip(shift) {
                *c += s;
            }
        }
        Self::new(self.dim, coords)
    }

    /// Projection of every particle onto direction `u`.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        self.iter().map(|p| crate::linalg::dot(p, u)).collect()
    }
}
