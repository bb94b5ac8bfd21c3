//! Backward adjoint pass and loss gradient.
//!
//! The token adjoint solves `dp/ds = -D_x V(x_s)^T p` and the measure adjoint
//! is carried along characteristics as `g_i(s) = grad phi_s(z_i(s))`:
//!
//! ```text
//! dg_i/ds = -D_x V(z_i)^T g_i - W[x_s](z_i)^T p - (1/n) sum_j W[z_j](z_i)^T g_j
//! ```
//!
//! with `p(1) = x_1 - y_0`, `g(1) = 0`. The loss gradient on layer `l` is the
//! in-layer average (a quadrature over the layer's grid points) of `D_theta V(x_s)^T p_s + (1/n) sum_i D_theta V(z_i)^T g_i`.
//!
//! The backward system is discretized with the forward scheme (continuous
//! adjoint); it is not the exact transpose of the forward RK4 map.

use std::io::Write;

use crate::csv::CsvWriter;
use crate::ensemble::Ensemble;
use crate::error::{check_dim, CfmError, Result};
use crate::flow::{integrate_forward, IntegratorConfig, Scheme, Trajectory};
use crate::linalg::{all_finite, l2_norm};
use crate::params::{LossGradient, ParameterPath};
use crate::population::Sample;
use crate::rng::RngHandle;
use crate::velocity::DerivativeSnapshot;

/// `1/2 |x1 - y0|^2`.
pub fn loss_eval(x1: &[f64], y0: &[f64]) -> f64 {
    0.5 * x1.iter().zip(y0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

pub fn terminal_conditions(x1: &[f64], y0: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p1 = x1.iter().zip(y0).map(|(a, b)| a - b).collect();
    (p1, vec![vec![0.0; x1.len()]; n])
}

#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    pub p_states: Vec<Vec<f64>>,
    /// Particle-major `n * d` block per grid point.
    pub g_states: Vec<Vec<f64>>,
    /// Largest `||D_x V(x)||_op` met at any coefficient time.
    pub max_jac_norm: f64,
    /// `|p_1| exp(sum_k h max ||D_x V||)`, the discrete Gronwall envelope for `p`.
    pub envelope: f64,
}

impl AdjointTrajectory {
    pub fn g(&self, k: usize, i: usize) -> &[f64] {
        let d = self.p_states[k].len();
        &self.g_states[k][i * d..(i + 1) * d]
    }

    pub fn max_p_norm(&self) -> f64 {
        self.p_states.iter().map(|p| l2_norm(p)).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, grid: &[f64], out: W) -> std::io::Result<()> {
        let d = self.p_states[0].len();
        let mut csv = CsvWriter::new(out);
        let mut header = vec!["step".to_string(), "s".into(), "kind".into(), "particle_index".into()];
        header.extend((0..d).map(|c| format!("coord_{c}")));
        csv.header(&header)?;
        for (k, s) in grid.iter().enumerate() {
            csv.row().int(k as i64).real(*s).text("p").text("").reals(&self.p_states[k]).finish()?;
            for (i, g) in self.g_states[k].chunks_exact(d).enumerate() {
                csv.row().int(k as i64).real(*s).text("g").int(i as i64).reals(g).finish()?;
            }
        }
        csv.flush()
    }
}

fn snapshot(theta: &ParameterPath, l: usize, x: &[f64], mu: &Ensemble) -> Result<DerivativeSnapshot> {
    DerivativeSnapshot::build(theta.layer(l), x, mu)
}

fn snapshot_flat(theta: &ParameterPath, l: usize, y: &[f64], d: usize) -> Result<DerivativeSnapshot> {
    let mu = Ensemble::from_raw(d, y[d..].to_vec());
    snapshot(theta, l, &y[..d], &mu)
}

/// Right-hand side of the reversed-time system, `dlambda/dtau = A^T lambda`
/// with `lambda = (p, g_1, .., g_n)`.
fn adjoint_rhs(s: &DerivativeSnapshot, d: usize, lam: &[f64], out: &mut [f64], buf: &mut [f64]) {
    let n = s.num_particles();
    let (p, g) = lam.split_at(d);
    let (op, og) = out.split_at_mut(d);
    s.jac_x_t_into(0, p, op);
    s.measure_coupling(p, g, buf);
    for i in 0..n {
        let dst = &mut og[i * d..(i + 1) * d];
        s.jac_x_t_into(1 + i, &g[i * d..(i + 1) * d], dst);
        for (a, b) in dst.iter_mut().zip(&buf[i * d..(i + 1) * d]) {
            *a += b;
        }
    }
}

fn accumulate_integrand(s: &DerivativeSnapshot, d: usize, lam: &[f64], weight: f64, block: &mut crate::params::LayerParams) {
    let n = s.num_particles();
    let (p, g) = lam.split_at(d);
    s.theta_t_accumulate(0, p, weight, block);
    let wi = weight / n as f64;
    for i in 0..n {
        let gi = &g[i * d..(i + 1) * d];
        if gi.iter().any(|v| *v != 0.0) {
            s.theta_t_accumulate(1 + i, gi, wi, block);
        }
    }
}

fn check_inputs(traj: &Trajectory, theta: &ParameterPath, y0: &[f64]) -> Result<()> {
    check_dim(traj.dim(), y0.len(), "target")?;
    check_dim(traj.dim(), theta.dim(), "parameter path")?;
    let expected = traj.config.num_steps(theta.num_layers());
    if expected != traj.num_steps() {
        return Err(CfmError::ScheduleMismatch(format!(
            "trajectory has {} steps, path with {} layers expects {}",
            traj.num_steps(),
            theta.num_layers(),
            expected
        )));
    }
    if let Some(layer) = theta.layers().iter().find(|l| !l.family().is_differentiable()) {
        return Err(CfmError::UnsupportedFamily {
            op: "backward_integrate",
            family: layer.family(),
        });
    }
    Ok(())
}

/// Backward sweep; when `grad` is given the layer gradients are accumulated
/// from the same snapshots (see [`assemble_gradient`] for the quadrature).
fn sweep(traj: &Trajectory, theta: &ParameterPath, y0: &[f64], mut grad: Option<&mut LossGradient>) -> Result<AdjointTrajectory> {
    check_inputs(traj, theta, y0)?;
    let d = traj.dim();
    let n = traj.num_particles();
    let steps = traj.num_steps();
    let m = traj.config.substeps_per_layer;
    let h = traj.step_size();
    let size = (n + 1) * d;

    let (p1, _) = terminal_conditions(&traj.x_states[steps], y0, n);
    let mut lam = vec![0.0; size];
    lam[..d].copy_from_slice(&p1);
    let p1_norm = l2_norm(&p1);

    let mut p_states = vec![Vec::new(); steps + 1];
    let mut g_states = vec![Vec::new(); steps + 1];
    p_states[steps] = p1;
    g_states[steps] = vec![0.0; n * d];

    let mut k1 = vec![0.0; size];
    let mut k2 = vec![0.0; size];
    let mut k3 = vec![0.0; size];
    let mut k4 = vec![0.0; size];
    let mut tmp = vec![0.0; size];
    let mut buf = vec![0.0; n * d];
    let mut max_jac: f64 = 0.0;
    let mut log_growth = 0.0;
    // snapshot of the state at the left end of the previous (later) step
    let mut carried: Option<(usize, DerivativeSnapshot)> = None;

    for k in (0..steps).rev() {
        let l = traj.layer_index[k];
        let end = match carried.take() {
            Some((cl, s)) if cl == l => s,
            _ => snapshot(theta, l, &traj.x_states[k + 1], &traj.particle_states[k + 1])?,
        };
        let start = snapshot(theta, l, &traj.x_states[k], &traj.particle_states[k])?;
        let lam_end = lam.clone();

        let mut step_jac = end.jac_x(0).op_norm().max(start.jac_x(0).op_norm());
        match traj.config.scheme {
            Scheme::Euler => {
                adjoint_rhs(&start, d, &lam, &mut k1, &mut buf);
                for (a, b) in lam.iter_mut().zip(&k1) {
                    *a += h * b;
                }
            }
            Scheme::Rk4 => {
                let st = &traj.stage_states[k];
                let mid_state: Vec<f64> = st.y2.iter().zip(&st.y3).map(|(a, b)| 0.5 * (a + b)).collect();
                let mid = snapshot_flat(theta, l, &mid_state, d)?;
                step_jac = step_jac.max(mid.jac_x(0).op_norm());
                adjoint_rhs(&end, d, &lam, &mut k1, &mut buf);
                for i in 0..size {
                    tmp[i] = lam[i] + 0.5 * h * k1[i];
                }
                adjoint_rhs(&mid, d, &tmp, &mut k2, &mut buf);
                for i in 0..size {
                    tmp[i] = lam[i] + 0.5 * h * k2[i];
                }
                adjoint_rhs(&mid, d, &tmp, &mut k3, &mut buf);
                for i in 0..size {
                    tmp[i] = lam[i] + h * k3[i];
                }
                adjoint_rhs(&start, d, &tmp, &mut k4, &mut buf);
                for i in 0..size {
                    lam[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        if !all_finite(&lam) {
            return Err(CfmError::NonFiniteAdjoint { step: k });
        }

        max_jac = max_jac.max(step_jac);
        log_growth += h * step_jac;
        let bound = p1_norm * log_growth.exp();
        let p_norm = l2_norm(&lam[..d]);
        if p_norm > bound * (1.0 + 1e-12) + 1e-300 {
            return Err(CfmError::BoundViolation(format!(
                "token adjoint |p| = {p_norm:.6e} exceeds Gronwall envelope {bound:.6e} at step {k}"
            )));
        }

        if let Some(g) = grad.as_deref_mut() {
            let block = &mut g.blocks[l];
            let j = k - l * m;
            match traj.config.scheme {
                Scheme::Euler => accumulate_integrand(&start, d, &lam_end, 1.0 / m as f64, block),
                Scheme::Rk4 => {
                    if j + 1 == m {
                        accumulate_integrand(&end, d, &lam_end, layer_weight(m, m), block);
                    }
                    accumulate_integrand(&start, d, &lam, layer_weight(j, m), block);
                }
            }
        }

        p_states[k] = lam[..d].to_vec();
        g_states[k] = lam[d..].to_vec();
        carried = Some((l, start));
    }

    Ok(AdjointTrajectory {
        p_states,
        g_states,
        max_jac_norm: max_jac,
        envelope: p1_norm * log_growth.exp(),
    })
}

/// Integrate the adjoint system backward on the trajectory's grid. Fails with
/// [`CfmError::BoundViolation`] if the token adjoint leaves its discrete
/// Gronwall envelope.
pub fn backward_integrate(traj: &Trajectory, theta: &ParameterPath, y0: &[f64]) -> Result<AdjointTrajectory> {
    sweep(traj, theta, y0, None)
}

/// Weight of grid point `j` (of `0..=m`) in the in-layer average: composite
/// Simpson for even `m`, trapezoidal for odd `m`.
pub fn layer_weight(j: usize, m: usize) -> f64 {
    let mf = m as f64;
    if m % 2 == 0 {
        let c = if j == 0 || j == m {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        c / (3.0 * mf)
    } else if j == 0 || j == m {
        0.5 / mf
    } else {
        1.0 / mf
    }
}

/// In-layer averages of the gradient integrand: [`layer_weight`] for RK4; for Euler
/// the rule `(1/m) sum_k D_theta V(y_k)^T lambda_{k+1}`, which makes the Euler
/// gradient the exact derivative of the discrete forward map.
pub fn assemble_gradient(traj: &Trajectory, adj: &AdjointTrajectory, theta: &ParameterPath) -> Result<LossGradient> {
    if adj.p_states.len() != traj.grid.len() || adj.g_states.len() != traj.grid.len() {
        return Err(CfmError::InvalidArgument(format!(
            "adjoint has {} grid points, trajectory {}",
            adj.p_states.len(),
            traj.grid.len()
        )));
    }
    check_dim(traj.dim(), theta.dim(), "parameter path")?;
    let d = traj.dim();
    let m = traj.config.substeps_per_layer;
    let mut grad = LossGradient::zeros_like(theta);
    let mut lam = Vec::with_capacity((traj.num_particles() + 1) * d);
    for l in 0..theta.num_layers() {
        for j in 0..=m {
            let k = l * m + j;
            let (w, a) = match traj.config.scheme {
                Scheme::Rk4 => (layer_weight(j, m), k),
                Scheme::Euler if j == m => continue,
                Scheme::Euler => (1.0 / m as f64, k + 1),
            };
            let s = snapshot(theta, l, &traj.x_states[k], &traj.particle_states[k])?;
            lam.clear();
            lam.extend_from_slice(&adj.p_states[a]);
            lam.extend_from_slice(&adj.g_states[a]);
            accumulate_integrand(&s, d, &lam, w, &mut grad.blocks[l]);
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct GradientEval {
    pub loss: f64,
    pub grad: LossGradient,
    pub traj: Trajectory,
    pub adj: AdjointTrajectory,
}

/// Forward pass, backward pass and gradient in one sweep.
pub fn loss_and_gradient(
    x0: &[f64],
    mu0: &Ensemble,
    y0: &[f64],
    theta: &ParameterPath,
    cfg: &IntegratorConfig,
) -> Result<GradientEval> {
    let traj = integrate_forward(x0, mu0, theta, cfg)?;
    let mut grad = LossGradient::zeros_like(theta);
    let adj = sweep(&traj, theta, y0, Some(&mut grad))?;
    let loss = loss_eval(&traj.x_states[traj.num_steps()], y0);
    Ok(GradientEval { loss, grad, traj, adj })
}

/// Loss of the forward map only.
pub fn forward_loss(x0: &[f64], mu0: &Ensemble, y0: &[f64], theta: &ParameterPath, cfg: &IntegratorConfig) -> Result<f64> {
    let traj = integrate_forward(x0, mu0, theta, cfg)?;
    Ok(loss_eval(crate::flow::output_token(&traj), y0))
}

pub const FD_STEP: f64 = 1e-4;

/// Relative error floor, as a fraction of `|grad| |eta|`: directions nearly
/// orthogonal to the gradient are compared on the gradient's own scale.
pub const FD_REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionCheck {
    pub analytic: f64,
    pub finite_difference: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub analytic_refined: f64,
    pub finite_difference_refined: f64,
    pub rel_error_refined: f64,
    /// Truncation error of the central difference itself, estimated from a
    /// second stencil at `2 eps` as `|FD(2 eps) - FD(eps)| / 3`, on the same
    /// relative scale as `rel_error`.
    pub rel_fd_noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub substeps: usize,
    pub directions: Vec<DirectionCheck>,
    pub max_rel_error: f64,
    pub max_rel_error_refined: f64,
    pub max_abs_error: f64,
    pub max_rel_fd_noise: f64,
}

impl FdReport {
    /// `log2(err(m) / err(2m))`; infinite when the refined error vanishes.
    pub fn observed_order(&self) -> f64 {
        (self.max_rel_error / self.max_rel_error_refined).log2()
    }

    /// True when the error at `m` substeps is within a factor 10 of the
    /// central difference's own truncation error, so refinement cannot be
    /// resolved by this comparison.
    pub fn at_resolution_limit(&self) -> bool {
        self.max_rel_error <= 10.0 * self.max_rel_fd_noise
    }
}

fn rel_error(analytic: f64, fd: f64, scale: f64) -> f64 {
    let diff = (analytic - fd).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / fd.abs().max(FD_REL_FLOOR * scale)
}

fn directional_fd(
    x0: &[f64],
    mu0: &Ensemble,
    y0: &[f64],
    theta: &ParameterPath,
    eta: &ParameterPath,
    cfg: &IntegratorConfig,
    eps: f64,
) -> Result<f64> {
    let plus = theta.combine(1.0, eps, eta)?;
    let minus = theta.combine(1.0, -eps, eta)?;
    let lp = forward_loss(x0, mu0, y0, &plus, cfg)?;
    let lm = forward_loss(x0, mu0, y0, &minus, cfg)?;
    Ok((lp - lm) / (2.0 * eps))
}

/// Compare the adjoint pairing `<grad, eta>` with central differences of the
/// loss along `directions` random unit paths, at `m` and `2m` substeps.
/// Population contexts are materialized with `n` particles.
pub fn gradient_fd_check(
    sample: &Sample,
    n: usize,
    theta: &ParameterPath,
    cfg: &IntegratorConfig,
    directions: usize,
    rng: &RngHandle,
) -> Result<FdReport> {
    if directions == 0 {
        return Err(CfmError::InvalidArgument("directions must be >= 1".into()));
    }
    let mu0 = sample.materialize(n, &rng.named("context"))?;
    let x0 = &sample.x0;
    let y0 = &sample.y0;
    let refined = cfg.refined();
    let coarse_eval = loss_and_gradient(x0, &mu0, y0, theta, cfg)?;
    let fine_eval = loss_and_gradient(x0, &mu0, y0, theta, &refined)?;
    let grad_norm = coarse_eval.grad.as_path()?.inner(&coarse_eval.grad.as_path()?)?.sqrt();
    let fine_norm = fine_eval.grad.as_path()?.inner(&fine_eval.grad.as_path()?)?.sqrt();

    let dir_rng = rng.named("directions");
    let mut checks = Vec::with_capacity(directions);
    for j in 0..directions {
        let mut r = dir_rng.child(j as u64).rng();
        let raw = ParameterPath::random(&theta.schedule(), theta.dim(), 1.0, &mut r)?;
        let norm = raw.inner(&raw)?.sqrt();
        let eta = raw.combine(1.0 / norm, 0.0, &raw)?;

        let analytic = coarse_eval.grad.pair(&eta)?;
        let fd = directional_fd(x0, &mu0, y0, theta, &eta, cfg, FD_STEP)?;
        let fd_wide = directional_fd(x0, &mu0, y0, theta, &eta, cfg, 2.0 * FD_STEP)?;
        let analytic_refined = fine_eval.grad.pair(&eta)?;
        let fd_refined = directional_fd(x0, &mu0, y0, theta, &eta, &refined, FD_STEP)?;
        checks.push(DirectionCheck {
            analytic,
            finite_difference: fd,
            abs_error: (analytic - fd).abs(),
            rel_error: rel_error(analytic, fd, grad_norm),
            analytic_refined,
            finite_difference_refined: fd_refined,
            rel_error_refined: rel_error(analytic_refined, fd_refined, fine_norm),
            rel_fd_noise: rel_error(fd + (fd_wide - fd) / 3.0, fd, grad_norm),
        });
    }
    let max_of = |f: fn(&DirectionCheck) -> f64| checks.iter().map(f).fold(0.0, f64::max);
    Ok(FdReport {
        substeps: cfg.substeps_per_layer,
        max_rel_error: max_of(|c| c.rel_error),
        max_rel_error_refined: max_of(|c| c.rel_error_refined),
        max_abs_error: max_of(|c| c.abs_error),
        max_rel_fd_noise: max_of(|c| c.rel_fd_noise),
        directions: checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(loss_eval(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(loss_eval(&[3.0], &[1.0]), 2.0);
        let (a, b) = ([0.3, -1.2], [0.7, 0.4]);
        let c = 2.5;
        let scaled = loss_eval(&[c * a[0], c * a[1]], &[c * b[0], c * b[1]]);
        assert!((scaled - c * c * loss_eval(&a, &b)).abs() < 1e-14);
    }

    #[test]
    fn terminal_condition_examples() {
        let (p, g) = terminal_conditions(&[1.0, 0.0], &[0.0, 0.0], 3);
        assert_eq!(p, vec![1.0, 0.0]);
        assert_eq!(g, vec![vec![0.0; 2]; 3]);
        let (p, _) = terminal_conditions(&[0.4, 0.2], &[0.4, 0.2], 1);
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn layer_weights_sum_to_one() {
        for m in 1..12 {
            let total: f64 = (0..=m).map(|j| layer_weight(j, m)).sum();
            assert!((total - 1.0).abs() < 1e-15, "m = {m}");
        }
        assert_eq!(layer_weight(1, 2), 4.0 / 6.0);
        assert_eq!(layer_weight(0, 3), 1.0 / 6.0);
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1.0, 1.0, 5.0), 0.0);
        assert!((rel_error(1.1, 1.0, 1.0) - 0.1).abs() < 1e-12);
        // tiny directional derivative measured against 1% of the gradient scale
        assert!((rel_error(1e-6, 0.0, 1.0) - 1e-4).abs() < 1e-15);
    }
}
