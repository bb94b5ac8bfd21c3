//! Batched evaluation over a whole ensemble: the forward field at the token and
//! every particle, and the derivative operators needed by the adjoint pass.
//!
//! All sums run left to right over particle index so results are reproducible
//! bit for bit.

use super::activation::{gelu, gelu_prime};
use super::mlp::preactivation;
use crate::ensemble::Ensemble;
use crate::error::{CfmError, Result};
use crate::linalg::{axpy, dot, Mat};
use crate::params::{Family, LayerParams};

/// Reusable buffers for [`eval_field`].
#[derive(Debug, Default, Clone)]
pub struct FieldWorkspace {
    keys: Vec<f64>,
    logits: Vec<f64>,
    query: Vec<f64>,
    acc: Vec<f64>,
}

#[inline]
fn softmax_mean(qv: &[f64], keys: &[f64], coords: &[f64], d: usize, logits: &mut [f64], out: &mut [f64]) {
    let n = logits.len();
    let mut shift = f64::NEG_INFINITY;
    for j in 0..n {
        let l = dot(qv, &keys[j * d..(j + 1) * d]);
        logits[j] = l;
        if l > shift {
            shift = l;
        }
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut total = 0.0;
    for j in 0..n {
        let e = (logits[j] - shift).exp();
        total += e;
        axpy(e, &coords[j * d..(j + 1) * d], out);
    }
    let inv = 1.0 / total;
    out.iter_mut().for_each(|o| *o *= inv);
}

fn nearest_index(y: &[f64], mu: &Ensemble) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, z) in mu.iter().enumerate() {
        let mut s = 0.0;
        for c in 0..y.len() {
            let t = z[c] - y[c];
            s += t * t;
        }
        if s < best_d {
            best_d = s;
            best = j;
        }
    }
    best
}

/// Velocity of `layer` under measure `mu` at the token `x` (into `out_x`) and at
/// every particle of `mu` (into `out_z`, particle-major).
pub fn eval_field(
    layer: &LayerParams,
    x: &[f64],
    mu: &Ensemble,
    out_x: &mut [f64],
    out_z: &mut [f64],
    ws: &mut FieldWorkspace,
) {
    let d = mu.dim();
    let n = mu.len();
    debug_assert_eq!(out_z.len(), n * d);
    match layer {
        LayerParams::Attention { q, k, v } => {
            ws.keys.resize(n * d, 0.0);
            ws.logits.resize(n, 0.0);
            ws.query.resize(d, 0.0);
            ws.acc.resize(d, 0.0);
            for (j, z) in mu.iter().enumerate() {
                k.mul_vec_into(z, &mut ws.keys[j * d..(j + 1) * d]);
            }
            let coords = mu.coords();
            let eval_one = |y: &[f64], out: &mut [f64], ws: &mut FieldWorkspace| {
                q.mul_vec_into(y, &mut ws.query);
                softmax_mean(&ws.query, &ws.keys, coords, d, &mut ws.logits, &mut ws.acc);
                v.mul_vec_into(&ws.acc, out);
            };
            eval_one(x, out_x, ws);
            for i in 0..n {
                let y = &coords[i * d..(i + 1) * d];
                eval_one(y, &mut out_z[i * d..(i + 1) * d], ws);
            }
        }
        LayerParams::Mlp { w1, w2, b } => {
            let one = |y: &[f64], out: &mut [f64]| {
                let act: Vec<f64> = preactivation(w2, b, y).into_iter().map(gelu).collect();
                w1.mul_vec_into(&act, out);
            };
            one(x, out_x);
            for (i, y) in mu.iter().enumerate() {
                one(y, &mut out_z[i * d..(i + 1) * d]);
            }
        }
        LayerParams::NearestNeighborDrift { a } => {
            ws.acc.resize(d, 0.0);
            let one = |y: &[f64], out: &mut [f64], acc: &mut Vec<f64>| {
                let z = mu.particle(nearest_index(y, mu));
                for c in 0..d {
                    acc[c] = z[c] - y[c];
                }
                a.mul_vec_into(acc, out);
            };
            one(x, out_x, &mut ws.acc);
            for i in 0..n {
                let y = mu.particle(i);
                one(y, &mut out_z[i * d..(i + 1) * d], &mut ws.acc);
            }
        }
    }
}

pub(crate) fn nearest_drift(a: &Mat, x: &[f64], mu: &Ensemble) -> Vec<f64> {
    let z = mu.particle(nearest_index(x, mu));
    let diff: Vec<f64> = z.iter().zip(x).map(|(zi, xi)| zi - xi).collect();
    a.mul_vec(&diff)
}

/// Derivative operators of one layer frozen at a forward state `(x, mu)`.
///
/// Queries are indexed `0` for the token and `1 + i` for particle `i`.
#[derive(Debug, Clone)]
pub enum DerivativeSnapshot {
    Attention(AttentionSnapshot),
    Mlp(MlpSnapshot),
}

#[derive(Debug, Clone)]
pub struct AttentionSnapshot {
    d: usize,
    n: usize,
    q: Mat,
    k: Mat,
    v: Mat,
    points: Vec<f64>,
    weights: Vec<f64>,
    means: Vec<f64>,
    ktq: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpSnapshot {
    d: usize,
    n: usize,
    w1: Mat,
    w2: Mat,
    points: Vec<f64>,
    act: Vec<f64>,
    slope: Vec<f64>,
}

impl DerivativeSnapshot {
    pub fn build(layer: &LayerParams, x: &[f64], mu: &Ensemble) -> Result<Self> {
        let d = mu.dim();
        let n = mu.len();
        let mut points = Vec::with_capacity((n + 1) * d);
        points.extend_from_slice(x);
        points.extend_from_slice(mu.coords());
        match layer {
            LayerParams::Attention { q, k, v } => {
                let mut keys = vec![0.0; n * d];
                for (j, z) in mu.iter().enumerate() {
                    k.mul_vec_into(z, &mut keys[j * d..(j + 1) * d]);
                }
                let mut weights = vec![0.0; (n + 1) * n];
                let mut means = vec![0.0; (n + 1) * d];
                let mut ktq = vec![0.0; (n + 1) * d];
                let mut qv = vec![0.0; d];
                for qi in 0..=n {
                    let y = &points[qi * d..(qi + 1) * d];
                    q.mul_vec_into(y, &mut qv);
                    k.tr_mul_vec_into(&qv, &mut ktq[qi * d..(qi + 1) * d]);
                    let row = &mut weights[qi * n..(qi + 1) * n];
                    let mut shift = f64::NEG_INFINITY;
                    for j in 0..n {
                        let l = dot(&qv, &keys[j * d..(j + 1) * d]);
                        row[j] = l;
                        shift = shift.max(l);
                    }
                    let mut total = 0.0;
                    for w in row.iter_mut() {
                        *w = (*w - shift).exp();
                        total += *w;
                    }
                    let inv = 1.0 / total;
                    let mean = &mut means[qi * d..(qi + 1) * d];
                    for (j, w) in row.iter_mut().enumerate() {
                        *w *= inv;
                        axpy(*w, mu.particle(j), mean);
                    }
                }
                Ok(DerivativeSnapshot::Attention(AttentionSnapshot {
                    d,
                    n,
                    q: q.clone(),
                    k: k.clone(),
                    v: v.clone(),
                    points,
                    weights,
                    means,
                    ktq,
                }))
            }
            LayerParams::Mlp { w1, w2, b } => {
                let mut act = Vec::with_capacity((n + 1) * d);
                let mut slope = Vec::with_capacity((n + 1) * d);
                for y in points.chunks_exact(d) {
                    for h in preactivation(w2, b, y) {
                        act.push(gelu(h));
                        slope.push(gelu_prime(h));
                    }
                }
                Ok(DerivativeSnapshot::Mlp(MlpSnapshot {
                    d,
                    n,
                    w1: w1.clone(),
                    w2: w2.clone(),
                    points,
                    act,
                    slope,
                }))
            }
            LayerParams::NearestNeighborDrift { .. } => Err(CfmError::UnsupportedFamily {
                op: "derivative snapshot",
                family: Family::NearestNeighborDrift,
            }),
        }
    }

    pub fn num_particles(&self) -> usize {
        match self {
            DerivativeSnapshot::Attention(s) => s.n,
            DerivativeSnapshot::Mlp(s) => s.n,
        }
    }

    /// Spatial Jacobian at query `qi`, as a matrix.
    pub fn jac_x(&self, qi: usize) -> Mat {
        match self {
            DerivativeSnapshot::Attention(s) => {
                let d = s.d;
                let u = &s.means[qi * d..(qi + 1) * d];
                let row = &s.weights[qi * s.n..(qi + 1) * s.n];
                let mut m = Mat::zeros(d, d);
                let mut c = vec![0.0; d];
                for (j, w) in row.iter().enumerate() {
                    let z = &s.points[(j + 1) * d..(j + 2) * d];
                    for a in 0..d {
                        c[a] = z[a] - u[a];
                    }
                    for a in 0..d {
                        for b in 0..d {
                            let cur = m.get(a, b);
                            m.set(a, b, cur + w * c[a] * c[b]);
                        }
                    }
                }
                s.v.matmul(&m).matmul(&s.k.transpose()).matmul(&s.q)
            }
            DerivativeSnapshot::Mlp(s) => {
                let d = s.d;
                let slope = &s.slope[qi * d..(qi + 1) * d];
                let mut scaled = s.w2.clone();
                for (r, sl) in slope.iter().enumerate() {
                    for c in 0..d {
                        scaled.set(r, c, sl * s.w2.get(r, c));
                    }
                }
                s.w1.matmul(&scaled)
            }
        }
    }

    /// `D_x V(y_qi)^T w` into `out`.
    pub fn jac_x_t_into(&self, qi: usize, w: &[f64], out: &mut [f64]) {
        match self {
            DerivativeSnapshot::Attention(s) => {
                let d = s.d;
                let u = &s.means[qi * d..(qi + 1) * d];
                let vt_w = s.v.tr_mul_vec(w);
                let mut mvec = vec![0.0; d];
                let row = &s.weights[qi * s.n..(qi + 1) * s.n];
                let mut c = vec![0.0; d];
                for (j, wj) in row.iter().enumerate() {
                    let z = &s.points[(j + 1) * d..(j + 2) * d];
                    for a in 0..d {
                        c[a] = z[a] - u[a];
                    }
                    let proj = wj * dot(&c, &vt_w);
                    axpy(proj, &c, &mut mvec);
                }
                let kmv = s.k.mul_vec(&mvec);
                s.q.tr_mul_vec_into(&kmv, out);
            }
            DerivativeSnapshot::Mlp(s) => {
                let d = s.d;
                let slope = &s.slope[qi * d..(qi + 1) * d];
                let mut back = s.w1.tr_mul_vec(w);
                back.iter_mut().zip(slope).for_each(|(b, sl)| *b *= sl);
                s.w2.tr_mul_vec_into(&back, out);
            }
        }
    }

    /// Measure-coupling term of the particle adjoint:
    /// `out_i = W[x](z_i)^T p + (1/n) sum_j W[z_j](z_i)^T g_j` for every particle `i`,
    /// where `W[y](z)` is the Wasserstein Jacobian of the velocity at query `y`.
    pub fn measure_coupling(&self, p: &[f64], g: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let s = match self {
            DerivativeSnapshot::Attention(s) => s,
            DerivativeSnapshot::Mlp(_) => return,
        };
        let d = s.d;
        let n = s.n;
        let mut w = vec![0.0; d];
        for qi in 0..=n {
            let adj = if qi == 0 { p } else { &g[(qi - 1) * d..qi * d] };
            if adj.iter().all(|v| *v == 0.0) {
                continue;
            }
            s.v.tr_mul_vec_into(adj, &mut w);
            let u = &s.means[qi * d..(qi + 1) * d];
            let c = &s.ktq[qi * d..(qi + 1) * d];
            let uw = dot(u, &w);
            // density n*alpha, times 1/n for particle queries
            let scale = if qi == 0 { n as f64 } else { 1.0 };
            let row = &s.weights[qi * n..(qi + 1) * n];
            for i in 0..n {
                let z = &s.points[(i + 1) * d..(i + 2) * d];
                let f = scale * row[i];
                let proj = dot(z, &w) - uw;
                let dst = &mut out[i * d..(i + 1) * d];
                for a in 0..d {
                    dst[a] += f * (c[a] * proj + w[a]);
                }
            }
        }
    }

    /// `grad += scale * D_theta V(y_qi)^T a`.
    pub fn theta_t_accumulate(&self, qi: usize, a: &[f64], scale: f64, grad: &mut LayerParams) {
        match (self, grad) {
            (DerivativeSnapshot::Attention(s), LayerParams::Attention { q: dq, k: dk, v: dv }) => {
                let d = s.d;
                let y = &s.points[qi * d..(qi + 1) * d];
                let u = &s.means[qi * d..(qi + 1) * d];
                add_outer(dv, scale, a, u);
                let vt_a = s.v.tr_mul_vec(a);
                let row = &s.weights[qi * s.n..(qi + 1) * s.n];
                let mut m = vec![0.0; d];
                let mut c = vec![0.0; d];
                for (j, wj) in row.iter().enumerate() {
                    let z = &s.points[(j + 1) * d..(j + 2) * d];
                    for t in 0..d {
                        c[t] = z[t] - u[t];
                    }
                    axpy(wj * dot(&c, &vt_a), &c, &mut m);
                }
                add_outer(dq, scale, &s.k.mul_vec(&m), y);
                add_outer(dk, scale, &s.q.mul_vec(y), &m);
            }
            (DerivativeSnapshot::Mlp(s), LayerParams::Mlp { w1: dw1, w2: dw2, b: db }) => {
                let d = s.d;
                let y = &s.points[qi * d..(qi + 1) * d];
                let act = &s.act[qi * d..(qi + 1) * d];
                let slope = &s.slope[qi * d..(qi + 1) * d];
                add_outer(dw1, scale, a, act);
                let mut back = s.w1.tr_mul_vec(a);
                back.iter_mut().zip(slope).for_each(|(b, sl)| *b *= sl);
                add_outer(dw2, scale, &back, y);
                axpy(scale, &back, db);
            }
            _ => panic!("gradient block family does not match snapshot"),
        }
    }
}

fn add_outer(m: &mut Mat, scale: f64, a: &[f64], b: &[f64]) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    for (i, ai) in a.iter().enumerate() {
        let f = scale * ai;
        if f == 0.0 {
            continue;
        }
        axpy(f, b, &mut data[i * cols..(i + 1) * cols]);
    }
}
