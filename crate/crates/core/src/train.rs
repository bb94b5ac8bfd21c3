//! Online gradient descent with a ridge penalty,
//!
//! ```text
//! theta_{k+1} = (1 - eta lambda) theta_k - eta G(theta_k; x0^k, mu0^k, y0^k)
//! ```
//!
//! one observation per step, plus a paired driver that trains a reference
//! ("population") and an empirical trainer on the same token stream.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adjoint::loss_and_gradient;
use crate::csv::CsvWriter;
use crate::ensemble::Ensemble;
use crate::error::{check_dim, CfmError, Result};
use crate::flow::IntegratorConfig;
use crate::linalg::Mat;
use crate::params::{path_axpy, path_linf_distance, path_norm, LossGradient, ParameterPath, PathNorm};
use crate::population::{sample_ensemble, sample_point, Context, PopulationSpec, Sample};
use crate::rng::RngHandle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OgdConfig {
    pub eta: f64,
    #[serde(default)]
    pub lambda: f64,
    pub iterations: usize,
    #[serde(default)]
    pub integrator: IntegratorConfig,
}

impl OgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(CfmError::InvalidArgument(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.eta * self.lambda < 1.0) {
            return Err(CfmError::InvalidArgument(format!(
                "lambda must lie in [0, 1/eta), got lambda={} eta={}",
                self.lambda, self.eta
            )));
        }
        self.integrator.validate()
    }

    pub fn decay(&self) -> f64 {
        1.0 - self.eta * self.lambda
    }
}

/// `(1 - eta lambda) theta - eta grad`.
pub fn ogd_step(theta: &ParameterPath, grad: &LossGradient, eta: f64, lambda: f64) -> Result<ParameterPath> {
    if eta * lambda >= 1.0 {
        return Err(CfmError::InvalidArgument(format!("eta*lambda = {} must be < 1", eta * lambda)));
    }
    path_axpy(-eta, grad, 1.0 - eta * lambda, theta)
}

/// How the target `y0` is produced from `x0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    Identity,
    Scaled { factor: f64 },
    Linear { matrix: Vec<Vec<f64>> },
    /// An independent draw from the token population.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamMode {
    Iid,
    /// Repeats a fixed list of `period` observations.
    FixedCycle { period: usize },
}

/// Deterministic stream of `(x0, y0)` pairs; observation `k` depends only on
/// `(rng, k)` (or `k mod period` for cycles).
#[derive(Debug, Clone)]
pub struct PairStream {
    pub tokens: PopulationSpec,
    pub target: Target,
    pub mode: StreamMode,
    pub rng: RngHandle,
}

impl PairStream {
    pub fn new(tokens: PopulationSpec, target: Target, mode: StreamMode, rng: RngHandle) -> Result<Self> {
        tokens.validate()?;
        if let StreamMode::FixedCycle { period: 0 } = mode {
            return Err(CfmError::InvalidArgument("cycle period must be >= 1".into()));
        }
        if let Target::Linear { matrix } = &target {
            if matrix.len() != tokens.dim || matrix.iter().any(|r| r.len() != tokens.dim) {
                return Err(CfmError::InvalidArgument(format!("target matrix must be {0}x{0}", tokens.dim)));
            }
        }
        Ok(Self { tokens, target, mode, rng })
    }

    pub fn pair(&self, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let idx = match self.mode {
            StreamMode::Iid => k,
            StreamMode::FixedCycle { period } => k % period,
        } as u64;
        let h = self.rng.child(idx);
        let x0 = sample_point(&self.tokens, &h.named("x0"))?;
        let y0 = match &self.target {
            Target::Identity => x0.clone(),
            Target::Scaled { factor } => x0.iter().map(|v| factor * v).collect(),
            Target::Linear { matrix } => Mat::from_rows(matrix).mul_vec(&x0),
            Target::Independent => sample_point(&self.tokens, &h.named("y0"))?,
        };
        Ok((x0, y0))
    }

    pub fn pairs(&self, count: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        (0..count).map(|k| self.pair(k)).collect()
    }

    /// The first `count` observations with the given context.
    pub fn samples(&self, count: usize, context: &Context) -> Result<Vec<Sample>> {
        Ok(self
            .pairs(count)?
            .into_iter()
            .map(|(x0, y0)| Sample {
                x0,
                context: context.clone(),
                y0,
            })
            .collect())
    }
}

/// One row of a training log. Entry `k` describes `theta_k`; the loss and
/// gradient are those evaluated at `theta_k` on observation `k`, so they are
/// absent for the final entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub k: usize,
    /// Reference trainer loss (paired runs only).
    pub loss_pop: Option<f64>,
    pub loss_emp: Option<f64>,
    pub theta_linf: f64,
    pub grad_linf: Option<f64>,
    /// `|theta_k - theta_hat_k|_{L^inf}` (paired runs only).
    pub deviation_linf: Option<f64>,
    pub theta_ref_linf: Option<f64>,
    pub grad_ref_linf: Option<f64>,
    /// `|G_k - G_hat_k|_{L^inf}` (paired runs only).
    pub grad_deviation_linf: Option<f64>,
}

impl TrainRecord {
    fn single(k: usize, theta: &ParameterPath) -> Self {
        Self {
            k,
            loss_pop: None,
            loss_emp: None,
            theta_linf: path_norm(theta, PathNorm::Linf),
            grad_linf: None,
            deviation_linf: None,
            theta_ref_linf: None,
            grad_ref_linf: None,
            grad_deviation_linf: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub final_theta: ParameterPath,
    pub final_theta_ref: Option<ParameterPath>,
}

impl TrainLog {
    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    pub fn max_grad_linf(&self) -> f64 {
        self.records.iter().filter_map(|r| r.grad_linf).fold(0.0, f64::max)
    }

    pub fn max_grad_deviation(&self) -> f64 {
        self.records.iter().filter_map(|r| r.grad_deviation_linf).fold(0.0, f64::max)
    }

    pub fn deviation_series(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.deviation_linf).collect()
    }

    pub fn sup_deviation(&self) -> Option<f64> {
        Some(self.deviation_series()?.into_iter().fold(0.0, f64::max))
    }

    /// `max_{k >= split} dev_k / max_{k <= split} dev_k`; `None` without a
    /// deviation series, a window outside the log, or a zero early window.
    pub fn uniformity_ratio(&self, split: usize) -> Option<f64> {
        let dev = self.deviation_series()?;
        if split >= dev.len() {
            return None;
        }
        let early = dev[..=split].iter().copied().fold(0.0, f64::max);
        let late = dev[split..].iter().copied().fold(0.0, f64::max);
        (early > 0.0).then(|| late / early)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = CsvWriter::new(out);
        w.header(&["k", "loss_pop", "loss_emp", "theta_linf", "grad_linf", "deviation_linf"])?;
        for r in &self.records {
            w.row()
                .int(r.k as i64)
                .opt_real(r.loss_pop)
                .opt_real(r.loss_emp)
                .real(r.theta_linf)
                .opt_real(r.grad_linf)
                .opt_real(r.deviation_linf)
                .finish()?;
        }
        w.flush()
    }
}

fn at_iteration<T>(k: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| CfmError::Training {
        iteration: k,
        source: Box::new(e),
    })
}

/// Plain OGD over `stream[..K]`. Population contexts are materialized with
/// `n` particles from `rng.child(k)`.
pub fn run_ogd(theta0: &ParameterPath, stream: &[Sample], n: usize, cfg: &OgdConfig, rng: &RngHandle) -> Result<TrainLog> {
    cfg.validate()?;
    let k_max = cfg.iterations;
    if stream.len() < k_max {
        return Err(CfmError::InvalidArgument(format!(
            "stream has {} samples, {} iterations requested",
            stream.len(),
            k_max
        )));
    }
    let mut theta = theta0.clone();
    let mut records = Vec::with_capacity(k_max + 1);
    for (k, sample) in stream.iter().take(k_max).enumerate() {
        let eval = at_iteration(k, (|| {
            let mu0 = sample.materialize(n, &rng.child(k as u64))?;
            loss_and_gradient(&sample.x0, &mu0, &sample.y0, &theta, &cfg.integrator)
        })())?;
        let mut rec = TrainRecord::single(k, &theta);
        rec.loss_emp = Some(eval.loss);
        rec.grad_linf = Some(eval.grad.norm_linf());
        records.push(rec);
        theta = at_iteration(k, ogd_step(&theta, &eval.grad, cfg.eta, cfg.lambda))?;
    }
    records.push(TrainRecord::single(k_max, &theta));
    Ok(TrainLog {
        records,
        final_theta: theta,
        final_theta_ref: None,
    })
}

/// How the two paired trainers draw their contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Distinct streams for the reference and empirical contexts.
    Independent,
    /// Both trainers read the same stream, so equal sizes give identical contexts.
    Shared,
}

/// Two OGD trainers in lockstep on shared `(x0, y0)` pairs: the reference
/// uses a fresh `n_ref`-particle context per step, the empirical trainer a
/// fresh `n`-particle one.
#[allow(clippy::too_many_arguments)]
pub fn run_paired_ogd(
    theta0: &ParameterPath,
    population: &PopulationSpec,
    pairs: &[(Vec<f64>, Vec<f64>)],
    n: usize,
    n_ref: usize,
    cfg: &OgdConfig,
    coupling: Coupling,
    rng: &RngHandle,
) -> Result<TrainLog> {
    let mut logs = run_paired_ogd_multi(theta0, population, pairs, &[n], n_ref, cfg, coupling, rng)?;
    Ok(logs.remove(0))
}

/// One reference trainer and one empirical trainer per entry of `ns`, all in
/// lockstep on the same pairs. Empirical contexts of size `n` at step `k`
/// come from `rng.named("empirical").child(n).child(k)`, or under
/// [`Coupling::Shared`] are the first `n` points of the reference context.
#[allow(clippy::too_many_arguments)]
pub fn run_paired_ogd_multi(
    theta0: &ParameterPath,
    population: &PopulationSpec,
    pairs: &[(Vec<f64>, Vec<f64>)],
    ns: &[usize],
    n_ref: usize,
    cfg: &OgdConfig,
    coupling: Coupling,
    rng: &RngHandle,
) -> Result<Vec<TrainLog>> {
    cfg.validate()?;
    population.validate()?;
    check_dim(theta0.dim(), population.dim, "population")?;
    let k_max = cfg.iterations;
    if pairs.len() < k_max {
        return Err(CfmError::InvalidArgument(format!(
            "stream has {} pairs, {} iterations requested",
            pairs.len(),
            k_max
        )));
    }
    for &n in ns {
        if n == 0 {
            return Err(CfmError::InvalidArgument("context size must be >= 1".into()));
        }
        match coupling {
            Coupling::Independent if n_ref < 8 * n => {
                return Err(CfmError::InvalidArgument(format!("N_ref = {n_ref} must be >= 8n = {}", 8 * n)));
            }
            Coupling::Shared if n > n_ref => {
                return Err(CfmError::InvalidArgument(format!("shared contexts need n = {n} <= N_ref = {n_ref}")));
            }
            _ => {}
        }
    }
    let ref_rng = rng.named("reference");
    let emp_rng = rng.named("empirical");
    let mut theta_ref = theta0.clone();
    let mut thetas = vec![theta0.clone(); ns.len()];
    let mut records: Vec<Vec<TrainRecord>> = vec![Vec::with_capacity(k_max + 1); ns.len()];
    let record = |k: usize, theta: &ParameterPath, theta_ref: &ParameterPath| -> Result<TrainRecord> {
        let mut rec = TrainRecord::single(k, theta);
        rec.theta_ref_linf = Some(path_norm(theta_ref, PathNorm::Linf));
        rec.deviation_linf = Some(path_linf_distance(theta, theta_ref)?);
        Ok(rec)
    };
    for (k, (x0, y0)) in pairs.iter().take(k_max).enumerate() {
        let mu_ref = at_iteration(k, sample_ensemble(population, n_ref, &ref_rng.child(k as u64)))?;
        let ev_ref = at_iteration(k, loss_and_gradient(x0, &mu_ref, y0, &theta_ref, &cfg.integrator))?;
        for (i, &n) in ns.iter().enumerate() {
            let ev = at_iteration(k, (|| {
                let mu = match coupling {
                    Coupling::Independent => sample_ensemble(population, n, &emp_rng.child(n as u64).child(k as u64))?,
                    Coupling::Shared => Ensemble::new(mu_ref.dim(), mu_ref.coords()[..n * mu_ref.dim()].to_vec())?,
                };
                loss_and_gradient(x0, &mu, y0, &thetas[i], &cfg.integrator)
            })())?;
            let mut rec = record(k, &thetas[i], &theta_ref)?;
            rec.loss_pop = Some(ev_ref.loss);
            rec.loss_emp = Some(ev.loss);
            rec.grad_linf = Some(ev.grad.norm_linf());
            rec.grad_ref_linf = Some(ev_ref.grad.norm_linf());
            rec.grad_deviation_linf = Some(ev.grad.linf_distance(&ev_ref.grad)?);
            records[i].push(rec);
            thetas[i] = at_iteration(k, ogd_step(&thetas[i], &ev.grad, cfg.eta, cfg.lambda))?;
        }
        theta_ref = at_iteration(k, ogd_step(&theta_ref, &ev_ref.grad, cfg.eta, cfg.lambda))?;
    }
    records
        .into_iter()
        .zip(thetas)
        .map(|(mut recs, theta)| {
            recs.push(record(k_max, &theta, &theta_ref)?);
            Ok(TrainLog {
                records: recs,
                final_theta: theta,
                final_theta_ref: Some(theta_ref.clone()),
            })
        })
        .collect()
}

/// Largest gradient norm seen in `steps` unregularized OGD steps from
/// `theta0` on `n`-particle contexts. Used to place `lambda` in the
/// large-ridge regime (`lambda = 2 G_hat`); the value is an empirical
/// estimate, not a certified bound.
pub fn warmup_gradient_bound(
    theta0: &ParameterPath,
    population: &PopulationSpec,
    stream: &PairStream,
    n: usize,
    eta: f64,
    steps: usize,
    integrator: &IntegratorConfig,
    rng: &RngHandle,
) -> Result<f64> {
    let samples = stream.samples(steps, &Context::Population(population.clone()))?;
    let cfg = OgdConfig {
        eta,
        lambda: 0.0,
        iterations: steps,
        integrator: *integrator,
    };
    Ok(run_ogd(theta0, &samples, n, &cfg, rng)?.max_grad_linf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Family, LayerParams};

    #[test]
    fn scalar_step_example() {
        let theta = ParameterPath::new(vec![LayerParams::NearestNeighborDrift {
            a: Mat::from_vec(1, 1, vec![2.0]),
        }])
        .unwrap();
        let grad = LossGradient {
            blocks: vec![LayerParams::NearestNeighborDrift {
                a: Mat::from_vec(1, 1, vec![1.0]),
            }],
        };
        let next = ogd_step(&theta, &grad, 0.1, 1.0).unwrap();
        let LayerParams::NearestNeighborDrift { a } = next.layer(0) else { unreachable!() };
        assert!((a.get(0, 0) - 1.7).abs() < 1e-15);
    }

    #[test]
    fn config_checks() {
        let mut cfg = OgdConfig {
            eta: 0.5,
            lambda: 2.0,
            iterations: 3,
            integrator: IntegratorConfig::rk4(2),
        };
        assert!(cfg.validate().is_err());
        cfg.lambda = 1.9;
        assert!(cfg.validate().is_ok());
        cfg.eta = 0.0;
        assert!(cfg.validate().is_err());
        let theta = ParameterPath::zeros(&[Family::Mlp], 2).unwrap();
        assert!(ogd_step(&theta, &LossGradient::zeros_like(&theta), 1.0, 1.0).is_err());
    }

    #[test]
    fn fixed_cycle_repeats() {
        let s = PairStream::new(
            PopulationSpec::uniform_ball(2, 1.0),
            Target::Scaled { factor: -1.0 },
            StreamMode::FixedCycle { period: 3 },
            RngHandle::new(4),
        )
        .unwrap();
        let p = s.pairs(7).unwrap();
        assert_eq!(p[0], p[3]);
        assert_eq!(p[1], p[4]);
        assert_ne!(p[0], p[1]);
        assert_eq!(p[2].1, vec![-p[2].0[0], -p[2].0[1]]);
    }

    #[test]
    fn uniformity_ratio_windows() {
        let theta = ParameterPath::zeros(&[Family::Mlp], 1).unwrap();
        let mut log = TrainLog {
            records: (0..5).map(|k| TrainRecord::single(k, &theta)).collect(),
            final_theta: theta,
            final_theta_ref: None,
        };
        assert_eq!(log.uniformity_ratio(2), None);
        for (r, d) in log.records.iter_mut().zip([0.0, 1.0, 2.0, 3.0, 1.0]) {
            r.deviation_linf = Some(d);
        }
        assert_eq!(log.uniformity_ratio(2), Some(1.5));
        assert_eq!(log.uniformity_ratio(9), None);
    }
}
