//! Velocity families and their derivative objects.
//!
//! For each differentiable family this module evaluates the field `V(x, mu)`,
//! the flat derivative `dV/dmu[x, mu](z)`, the spatial Jacobian `D_x V`, the
//! Wasserstein Jacobian `grad_W V[x, mu](z) = D_z dV/dmu[x, mu](z)` and the
//! adjoint-applied parameter Jacobian `D_theta V^T p`.
//!
//! The MLP block is written `W1 gelu(W2 x + b)`; in some typeset sources the
//! first matrix appears with a Wasserstein-style symbol, but it is an ordinary
//! weight matrix.

pub mod activation;
pub mod attention;
mod batch;
pub mod mlp;

pub use attention::AttentionCache;
pub use batch::{eval_field, DerivativeSnapshot, FieldWorkspace};

use crate::ensemble::Ensemble;
use crate::error::{check_dim, CfmError, Result};
use crate::linalg::Mat;
use crate::params::{Family, LayerParams, ThetaBlockGrad};

fn check_inputs(layer: &LayerParams, x: &[f64], mu: &Ensemble) -> Result<()> {
    if mu.is_empty() {
        return Err(CfmError::EmptyEnsemble);
    }
    check_dim(layer.dim(), x.len(), "token")?;
    check_dim(layer.dim(), mu.dim(), "ensemble")
}

fn unsupported(op: &'static str) -> CfmError {
    CfmError::UnsupportedFamily {
        op,
        family: Family::NearestNeighborDrift,
    }
}

pub fn eval_velocity(layer: &LayerParams, x: &[f64], mu: &Ensemble) -> Result<Vec<f64>> {
    check_inputs(layer, x, mu)?;
    Ok(match layer {
        LayerParams::Attention { q, k, v } => attention::velocity(v, &AttentionCache::new(q, k, x, mu)),
        LayerParams::Mlp { w1, w2, b } => mlp::velocity(w1, w2, b, x),
        LayerParams::NearestNeighborDrift { a } => batch::nearest_drift(a, x, mu),
    })
}

pub fn flat_derivative(layer: &LayerParams, x: &[f64], mu: &Ensemble, z: &[f64]) -> Result<Vec<f64>> {
    check_inputs(layer, x, mu)?;
    check_dim(layer.dim(), z.len(), "perturbation location")?;
    match layer {
        LayerParams::Attention { q, k, v } => Ok(attention::flat_derivative(k, v, &AttentionCache::new(q, k, x, mu), z)),
        LayerParams::Mlp { .. } => Ok(vec![0.0; layer.dim()]),
        LayerParams::NearestNeighborDrift { .. } => Err(unsupported("flat_derivative")),
    }
}

pub fn jac_x(layer: &LayerParams, x: &[f64], mu: &Ensemble) -> Result<Mat> {
    check_inputs(layer, x, mu)?;
    match layer {
        LayerParams::Attention { q, k, v } => Ok(attention::jac_x(q, k, v, &AttentionCache::new(q, k, x, mu))),
        LayerParams::Mlp { w1, w2, b } => Ok(mlp::jac_x(w1, w2, b, x)),
        LayerParams::NearestNeighborDrift { .. } => Err(unsupported("jac_x")),
    }
}

pub fn wasserstein_jac(layer: &LayerParams, x: &[f64], mu: &Ensemble, z: &[f64]) -> Result<Mat> {
    check_inputs(layer, x, mu)?;
    check_dim(layer.dim(), z.len(), "perturbation location")?;
    match layer {
        LayerParams::Attention { q, k, v } => {
            Ok(attention::wasserstein_jac(q, k, v, x, &AttentionCache::new(q, k, x, mu), z))
        }
        LayerParams::Mlp { .. } => Ok(Mat::zeros(layer.dim(), layer.dim())),
        LayerParams::NearestNeighborDrift { .. } => Err(unsupported("wasserstein_jac")),
    }
}

pub fn jac_theta_transpose_apply(layer: &LayerParams, x: &[f64], mu: &Ensemble, p: &[f64]) -> Result<ThetaBlockGrad> {
    check_inputs(layer, x, mu)?;
    check_dim(layer.dim(), p.len(), "adjoint vector")?;
    match layer {
        LayerParams::Attention { q, k, v } => {
            let cache = AttentionCache::new(q, k, x, mu);
            let (q, k, v) = attention::theta_transpose_apply(q, k, v, x, &cache, p);
            Ok(LayerParams::Attention { q, k, v })
        }
        LayerParams::Mlp { w1, w2, b } => {
            let (w1, w2, b) = mlp::theta_transpose_apply(w1, w2, b, x, p);
            Ok(LayerParams::Mlp { w1, w2, b })
        }
        LayerParams::NearestNeighborDrift { .. } => Err(unsupported("jac_theta_transpose_apply")),
    }
}

pub fn kernel_form_eval(layer: &LayerParams, x: &[f64], mu: &Ensemble) -> Result<Vec<f64>> {
    check_inputs(layer, x, mu)?;
    match layer {
        LayerParams::Attention { q, k, v } => Ok(attention::kernel_form(q, k, v, x, mu)),
        other => Err(CfmError::UnsupportedFamily {
            op: "kernel_form_eval",
            family: other.family(),
        }),
    }
}
