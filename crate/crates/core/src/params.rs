//! Per-layer parameters and piecewise-constant parameter paths over depth `[0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CfmError, Result};
use crate::linalg::{dot, Mat};

/// Velocity family of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Attention,
    Mlp,
    NearestNeighborDrift,
}

impl Family {
    pub fn is_differentiable(self) -> bool {
        !matches!(self, Family::NearestNeighborDrift)
    }
}

/// Parameters of one constant-depth layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    /// `V * softmax-mean` with logits `<Qx, Kz>`.
    Attention { q: Mat, k: Mat, v: Mat },
    /// `W1 * gelu(W2 x + b)`.
    Mlp { w1: Mat, w2: Mat, b: Vec<f64> },
    /// `A * (nearest particle - x)`; forward evaluation only.
    NearestNeighborDrift { a: Mat },
}

/// Gradient block with the same layout as the layer it differentiates.
pub type ThetaBlockGrad = LayerParams;

impl LayerParams {
    pub fn zeros(family: Family, d: usize) -> Self {
        match family {
            Family::Attention => LayerParams::Attention {
                q: Mat::zeros(d, d),
                k: Mat::zeros(d, d),
                v: Mat::zeros(d, d),
            },
            Family::Mlp => LayerParams::Mlp {
                w1: Mat::zeros(d, d),
                w2: Mat::zeros(d, d),
                b: vec![0.0; d],
            },
            Family::NearestNeighborDrift => LayerParams::NearestNeighborDrift { a: Mat::zeros(d, d) },
        }
    }

    /// Random layer whose every block (matrix or bias) has Frobenius norm `block_norm`.
    pub fn random<R: Rng + ?Sized>(family: Family, d: usize, block_norm: f64, rng: &mut R) -> Self {
        let mut m = || Mat::random_with_norm(d, d, block_norm, rng);
        match family {
            Family::Attention => {
                let q = m();
                let k = m();
                let v = m();
                LayerParams::Attention { q, k, v }
            }
            Family::Mlp => {
                let w1 = m();
                let w2 = m();
                let b = Mat::random_with_norm(d, 1, block_norm, rng).as_slice().to_vec();
                LayerParams::Mlp { w1, w2, b }
            }
            Family::NearestNeighborDrift => LayerParams::NearestNeighborDrift { a: m() },
        }
    }

    pub fn family(&self) -> Family {
        match self {
            LayerParams::Attention { .. } => Family::Attention,
            LayerParams::Mlp { .. } => Family::Mlp,
            LayerParams::NearestNeighborDrift { .. } => Family::NearestNeighborDrift,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LayerParams::Attention { q, .. } => q.rows(),
            LayerParams::Mlp { w1, .. } => w1.rows(),
            LayerParams::NearestNeighborDrift { a } => a.rows(),
        }
    }

    /// Parameter blocks in a fixed order, with names.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            LayerParams::Attention { q, k, v } => {
                vec![("Q", q.as_slice()), ("K", k.as_slice()), ("V", v.as_slice())]
            }
            LayerParams::Mlp { w1, w2, b } => {
                vec![("W1", w1.as_slice()), ("W2", w2.as_slice()), ("b", b.as_slice())]
            }
            LayerParams::NearestNeighborDrift { a } => vec![("A", a.as_slice())],
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerParams::Attention { q, k, v } => {
                vec![q.as_mut_slice(), k.as_mut_slice(), v.as_mut_slice()]
            }
            LayerParams::Mlp { w1, w2, b } => vec![w1.as_mut_slice(), w2.as_mut_slice(), b.as_mut_slice()],
            LayerParams::NearestNeighborDrift { a } => vec![a.as_mut_slice()],
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    /// Overwrite all entries from a flat vector in `flatten` order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.num_params(), flat.len(), "flattened layer")?;
        let mut offset = 0;
        for block in self.blocks_mut() {
            let len = block.len();
            block.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Euclidean norm of the flattened block.
    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// Largest Frobenius norm over the individual blocks.
    pub fn max_block_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .map(|(_, b)| dot(b, b).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn inner(&self, other: &LayerParams) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks().iter())
            .map(|((_, a), (_, b))| dot(a, b))
            .sum()
    }

    fn check_same_shape(&self, other: &LayerParams) -> Result<()> {
        if self.family() != other.family() || self.dim() != other.dim() {
            return Err(CfmError::ScheduleMismatch(format!(
                "{:?}(d={}) vs {:?}(d={})",
                self.family(),
                self.dim(),
                other.family(),
                other.dim()
            )));
        }
        Ok(())
    }

    /// `b * self + a * other`.
    pub fn combine(&self, b: f64, a: f64, other: &LayerParams) -> Result<LayerParams> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for (dst, (_, src)) in out.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in dst.iter_mut().zip(src) {
                *x = b * *x + a * y;
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

/// Which path norm to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathNorm {
    L1,
    Linf,
}

/// Piecewise-constant parameter path; layer `l` is active on `[l/L, (l+1)/L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPath {
    layers: Vec<LayerParams>,
}

impl ParameterPath {
    pub fn new(layers: Vec<LayerParams>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| CfmError::InvalidArgument("a path needs at least one layer".into()))?;
        let d = first.dim();
        for l in &layers {
            check_dim(d, l.dim(), "layer dimension")?;
        }
        Ok(Self { layers })
    }

    pub fn zeros(schedule: &[Family], d: usize) -> Result<Self> {
        Self::new(schedule.iter().map(|&f| LayerParams::zeros(f, d)).collect())
    }

    pub fn random<R: Rng + ?Sized>(schedule: &[Family], d: usize, block_norm: f64, rng: &mut R) -> Result<Self> {
        Self::new(
            schedule
                .iter()
                .map(|&f| LayerParams::random(f, d, block_norm, rng))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerParams {
        &self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn schedule(&self) -> Vec<Family> {
        self.layers.iter().map(LayerParams::family).collect()
    }

    pub fn all_differentiable(&self) -> bool {
        self.layers.iter().all(|l| l.family().is_differentiable())
    }

    pub fn norm(&self, which: PathNorm) -> f64 {
        path_norm(self, which)
    }

    /// `L^2([0,1])` inner product `(1/L) sum_l <a_l, b_l>`.
    pub fn inner(&self, other: &ParameterPath) -> Result<f64> {
        check_schedule(&self.layers, &other.layers)?;
        let s: f64 = self.layers.iter().zip(&other.layers).map(|(a, b)| a.inner(b)).sum();
        Ok(s / self.layers.len() as f64)
    }

    /// `b * self + a * other`, blockwise.
    pub fn combine(&self, b: f64, a: f64, other: &ParameterPath) -> Result<ParameterPath> {
        check_schedule(&self.layers, &other.layers)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(x, y)| x.combine(b, a, y))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParameterPath { layers })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(LayerParams::is_finite)
    }
}

fn check_schedule(a: &[LayerParams], b: &[LayerParams]) -> Result<()> {
    if a.len() != b.len() {
        return Err(CfmError::ScheduleMismatch(format!("{} layers vs {}", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.family() != y.family() || x.dim() != y.dim() {
            return Err(CfmError::ScheduleMismatch(format!(
                "{:?}(d={}) vs {:?}(d={})",
                x.family(),
                x.dim(),
                y.family(),
                y.dim()
            )));
        }
    }
    Ok(())
}

/// Loss gradient with one block per layer: the layer average of the
/// Frechet derivative over the layer's depth interval.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub blocks: Vec<ThetaBlockGrad>,
}

impl LossGradient {
    pub fn zeros_like(theta: &ParameterPath) -> Self {
        Self {
            blocks: theta
                .layers()
                .iter()
                .map(|l| LayerParams::zeros(l.family(), l.dim()))
                .collect(),
        }
    }

    /// Reinterpret the blocks as a parameter path.
    pub fn as_path(&self) -> Result<ParameterPath> {
        ParameterPath::new(self.blocks.clone())
    }

    /// Pairing with a direction path, `(1/L) sum_l <G_l, eta_l>`; approximates
    /// the directional derivative of the loss along `eta`.
    pub fn pair(&self, eta: &ParameterPath) -> Result<f64> {
        check_schedule(&self.blocks, eta.layers())?;
        let s: f64 = self.blocks.iter().zip(eta.layers()).map(|(a, b)| a.inner(b)).sum();
        Ok(s / self.blocks.len() as f64)
    }

    pub fn norm_linf(&self) -> f64 {
        self.blocks.iter().map(LayerParams::norm).fold(0.0, f64::max)
    }

    /// Largest blockwise difference `max_l |G_l - H_l|`.
    pub fn linf_distance(&self, other: &LossGradient) -> Result<f64> {
        check_schedule(&self.blocks, &other.blocks)?;
        let mut m: f64 = 0.0;
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            m = m.max(a.combine(1.0, -1.0, b)?.norm());
        }
        Ok(m)
    }
}

/// `b * theta + a * g`, blockwise.
pub fn path_axpy(a: f64, g: &LossGradient, b: f64, theta: &ParameterPath) -> Result<ParameterPath> {
    check_schedule(&g.blocks, theta.layers())?;
    let layers = theta
        .layers()
        .iter()
        .zip(&g.blocks)
        .map(|(t, gb)| t.combine(b, a, gb))
        .collect::<Result<Vec<_>>>()?;
    ParameterPath::new(layers)
}

/// `L^1` norm `(1/L) sum_l |theta_l|` or `L^inf` norm `max_l |theta_l|`.
pub fn path_norm(theta: &ParameterPath, which: PathNorm) -> f64 {
    let norms = theta.layers().iter().map(LayerParams::norm);
    match which {
        PathNorm::L1 => norms.sum::<f64>() / theta.num_layers() as f64,
        PathNorm::Linf => norms.fold(0.0, f64::max),
    }
}

/// Sup-norm distance between two paths, `max_l |a_l - b_l|`.
pub fn path_linf_distance(a: &ParameterPath, b: &ParameterPath) -> Result<f64> {
    Ok(path_norm(&a.combine(1.0, -1.0, b)?, PathNorm::Linf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_attention(q: f64, k: f64, v: f64) -> LayerParams {
        LayerParams::Attention {
            q: Mat::from_vec(1, 1, vec![q]),
            k: Mat::from_vec(1, 1, vec![k]),
            v: Mat::from_vec(1, 1, vec![v]),
        }
    }

    #[test]
    fn axpy_identity_and_reinterpretation() {
        let theta = ParameterPath::new(vec![scalar_attention(1.0, 2.0, 3.0)]).unwrap();
        let g = LossGradient {
            blocks: vec![scalar_attention(-1.0, 0.5, 4.0)],
        };
        assert_eq!(path_axpy(0.0, &g, 1.0, &theta).unwrap(), theta);
        assert_eq!(path_axpy(1.0, &g, 0.0, &theta).unwrap(), g.as_path().unwrap());
    }

    #[test]
    fn ridge_update_on_scalar_block() {
        let (eta, lambda) = (0.1, 1.0);
        let theta = ParameterPath::new(vec![LayerParams::NearestNeighborDrift {
            a: Mat::from_vec(1, 1, vec![2.0]),
        }])
        .unwrap();
        let g = LossGradient {
            blocks: vec![LayerParams::NearestNeighborDrift {
                a: Mat::from_vec(1, 1, vec![1.0]),
            }],
        };
        let out = path_axpy(-eta, &g, 1.0 - eta * lambda, &theta).unwrap();
        match out.layer(0) {
            LayerParams::NearestNeighborDrift { a } => assert!((a.get(0, 0) - 1.7).abs() < 1e-15),
            _ => unreachable!(),
        }
    }

    #[test]
    fn schedule_mismatch_is_rejected() {
        let theta = ParameterPath::zeros(&[Family::Attention], 2).unwrap();
        let g = LossGradient::zeros_like(&ParameterPath::zeros(&[Family::Mlp], 2).unwrap());
        assert!(matches!(
            path_axpy(1.0, &g, 1.0, &theta),
            Err(CfmError::ScheduleMismatch(_))
        ));
        let g2 = LossGradient::zeros_like(&ParameterPath::zeros(&[Family::Attention, Family::Attention], 2).unwrap());
        assert!(path_axpy(1.0, &g2, 1.0, &theta).is_err());
    }

    #[test]
    fn norms_by_hand() {
        let zero = ParameterPath::zeros(&[Family::Attention, Family::Mlp], 3).unwrap();
        assert_eq!(path_norm(&zero, PathNorm::L1), 0.0);
        assert_eq!(path_norm(&zero, PathNorm::Linf), 0.0);

        // flattened norms 1 and 3
        let two = ParameterPath::new(vec![scalar_attention(1.0, 0.0, 0.0), scalar_attention(0.0, 3.0, 0.0)]).unwrap();
        assert!((path_norm(&two, PathNorm::L1) - 2.0).abs() < 1e-15);
        assert!((path_norm(&two, PathNorm::Linf) - 3.0).abs() < 1e-15);

        let ident = ParameterPath::new(vec![LayerParams::Attention {
            q: Mat::identity(2),
            k: Mat::zeros(2, 2),
            v: Mat::zeros(2, 2),
        }])
        .unwrap();
        let r2 = 2f64.sqrt();
        assert!((path_norm(&ident, PathNorm::L1) - r2).abs() < 1e-15);
        assert!((path_norm(&ident, PathNorm::Linf) - r2).abs() < 1e-15);
    }

    #[test]
    fn flatten_roundtrip_and_block_norms() {
        let mut rng = crate::rng::RngHandle::new(1).rng();
        let l = LayerParams::random(Family::Mlp, 3, 0.7, &mut rng);
        assert!((l.max_block_norm() - 0.7).abs() < 1e-12);
        assert!((l.norm() - 0.7 * 3f64.sqrt()).abs() < 1e-12);
        let mut z = LayerParams::zeros(Family::Mlp, 3);
        z.assign_flat(&l.flatten()).unwrap();
        assert_eq!(z, l);
    }
}
