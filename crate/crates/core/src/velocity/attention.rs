//! Softmax self-attention `V(x, mu) = V U(x)` with `U(x) = sum_i alpha_i z_i`.

use crate::ensemble::Ensemble;
use crate::linalg::{axpy, dot, Mat};

/// Per-query softmax statistics.
///
/// `weights` are the normalized softmax weights (they sum to one); the
/// density `alpha(x, z) = exp<Qx, Kz> / Z(x)` with `Z(x) = int exp<Qx, Ky> dmu(y)`
/// is exposed through [`AttentionCache::density`], and equals `n * weights[i]`
/// at particle `i`.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub query: Vec<f64>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub mean: Vec<f64>,
    pub second_moment: Mat,
    shift: f64,
    mean_exp: f64,
}

impl AttentionCache {
    pub fn new(q: &Mat, k: &Mat, x: &[f64], mu: &Ensemble) -> Self {
        let d = mu.dim();
        let n = mu.len();
        let query = q.mul_vec(x);
        let mut key = vec![0.0; d];
        let mut logits = Vec::with_capacity(n);
        for z in mu.iter() {
            k.mul_vec_into(z, &mut key);
            logits.push(dot(&query, &key));
        }
        let shift = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = logits.iter().map(|l| (l - shift).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);

        let mut mean = vec![0.0; d];
        for (w, z) in weights.iter().zip(mu.iter()) {
            axpy(*w, z, &mut mean);
        }
        let mut second_moment = Mat::zeros(d, d);
        let mut c = vec![0.0; d];
        for (w, z) in weights.iter().zip(mu.iter()) {
            for a in 0..d {
                c[a] = z[a] - mean[a];
            }
            let m = second_moment.as_mut_slice();
            for a in 0..d {
                let wa = w * c[a];
                for b in 0..d {
                    m[a * d + b] += wa * c[b];
                }
            }
        }
        Self {
            query,
            logits,
            weights,
            mean,
            second_moment,
            shift,
            mean_exp: total / n as f64,
        }
    }

    /// `alpha(x, z) = exp<Qx, Kz> / Z(x)` for an arbitrary location `z`.
    pub fn density(&self, k: &Mat, z: &[f64]) -> f64 {
        let l = dot(&self.query, &k.mul_vec(z));
        (l - self.shift).exp() / self.mean_exp
    }
}

/// `V U(x)`.
pub fn velocity(v: &Mat, cache: &AttentionCache) -> Vec<f64> {
    v.mul_vec(&cache.mean)
}

/// `alpha(x,z) V (z - U(x))`.
pub fn flat_derivative(k: &Mat, v: &Mat, cache: &AttentionCache, z: &[f64]) -> Vec<f64> {
    let a = cache.density(k, z);
    let centered: Vec<f64> = z.iter().zip(&cache.mean).map(|(zi, ui)| zi - ui).collect();
    let mut out = v.mul_vec(&centered);
    out.iter_mut().for_each(|o| *o *= a);
    out
}

/// `V M(x) K^T Q`.
pub fn jac_x(q: &Mat, k: &Mat, v: &Mat, cache: &AttentionCache) -> Mat {
    v.matmul(&cache.second_moment).matmul(&k.transpose()).matmul(q)
}

/// `alpha(x,z) [V (z - U)(K^T Q x)^T + V]`.
pub fn wasserstein_jac(q: &Mat, k: &Mat, v: &Mat, x: &[f64], cache: &AttentionCache, z: &[f64]) -> Mat {
    let a = cache.density(k, z);
    let centered: Vec<f64> = z.iter().zip(&cache.mean).map(|(zi, ui)| zi - ui).collect();
    let vc = v.mul_vec(&centered);
    let ktqx = k.tr_mul_vec(&q.mul_vec(x));
    let mut out = Mat::outer(&vc, &ktqx).add(v);
    out.scale_mut(a);
    out
}

/// Blocks `(dQ, dK, dV)` with `<(dQ,dK,dV), (DQ,DK,DV)> = <p, D_theta V [DQ,DK,DV]>`.
pub fn theta_transpose_apply(q: &Mat, k: &Mat, v: &Mat, x: &[f64], cache: &AttentionCache, p: &[f64]) -> (Mat, Mat, Mat) {
    let dv = Mat::outer(p, &cache.mean);
    let m_vtp = cache.second_moment.mul_vec(&v.tr_mul_vec(p));
    let dq = Mat::outer(&k.mul_vec(&m_vtp), x);
    let dk = Mat::outer(&q.mul_vec(x), &m_vtp);
    (dq, dk, dv)
}

/// Ratio-of-sums evaluation `F(int E dmu)` with `E(x,y) = (e^{<Qx,Ky>} V y, e^{<Qx,Ky>})`.
///
/// Both sums carry the same max-logit scaling, which cancels in the ratio.
pub fn kernel_form(q: &Mat, k: &Mat, v: &Mat, x: &[f64], mu: &Ensemble) -> Vec<f64> {
    let d = mu.dim();
    let qx = q.mul_vec(x);
    let logits: Vec<f64> = mu.iter().map(|z| dot(&qx, &k.mul_vec(z))).collect();
    let shift = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut numer = vec![0.0; d];
    let mut denom = 0.0;
    let mut vz = vec![0.0; d];
    for (l, z) in logits.iter().zip(mu.iter()) {
        let e = (l - shift).exp();
        v.mul_vec_into(z, &mut vz);
        axpy(e, &vz, &mut numer);
        denom += e;
    }
    numer.iter_mut().for_each(|c| *c /= denom);
    numer
}
