//! Acceptance suite. Each criterion builds its experiment configuration at
//! one of three scales, runs it, and checks the outcome against fixed bands.
//! Files written are deterministic; wall times are only reported in memory.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::audit::{audit_bounds, Bound};
use super::config::ExperimentConfig;
use super::output::{meta_document, Artifact, Runner, Table};
use super::{exp_backward_poc, exp_forward_poc, exp_grad_check};
use crate::ensemble::Ensemble;
use crate::error::{CfmError, Result};
use crate::flow::{integrate_forward, output_token, IntegratorConfig};
use crate::linalg::{dist, Mat};
use crate::metrics::w1;
use crate::oracle::{expm, w1_permutation};
use crate::params::{LayerParams, ParameterPath};
use crate::population::{sample_ensemble, PopulationSpec};
use crate::rng::RngHandle;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Seconds; exercises every code path, bands are not meaningful.
    Quick,
    /// Single-core budget of a few minutes per rate criterion.
    Reduced,
    /// The sizes the criteria are stated at.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelftestConfig {
    #[serde(default = "reduced")]
    pub scale: Scale,
    #[serde(default)]
    pub master_seed: u64,
    /// Subset of criteria to run; all when absent.
    #[serde(default)]
    pub criteria: Option<Vec<u8>>,
    #[serde(default = "default_name")]
    pub name: String,
}

fn reduced() -> Scale {
    Scale::Reduced
}

fn default_name() -> String {
    "selftest".into()
}

impl SelftestConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CfmError::InvalidArgument(format!("config: {}", e.message())))?;
        if let Some(c) = &cfg.criteria {
            if let Some(bad) = c.iter().find(|&&i| !(1..=CRITERIA).contains(&i)) {
                return Err(CfmError::InvalidArgument(format!("unknown criterion {bad}")));
            }
        }
        Ok(cfg)
    }

    fn selected(&self) -> Vec<u8> {
        self.criteria.clone().unwrap_or_else(|| (1..=CRITERIA).collect())
    }
}

pub const CRITERIA: u8 = 10;

pub fn title(id: u8) -> &'static str {
    match id {
        1 => "gradient matches finite differences",
        2 => "closed-form flow oracle and RK4 order",
        3 => "forward sharp rate",
        4 => "Wasserstein LLN rate",
        5 => "backward uniform-in-k deviation",
        6 => "backward sharp rate",
        7 => "velocity and support bound audit",
        8 => "kernel-form identity",
        9 => "exact W1 solver",
        10 => "determinism",
        _ => "unknown",
    }
}

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u8,
    pub passed: bool,
    pub detail: String,
    /// `(metric, value)` pairs behind the verdict.
    pub metrics: Vec<(String, f64)>,
    pub seconds: f64,
    pub artifacts: Vec<Artifact>,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<40} {}  {:>8.1}s  {}",
            self.id,
            title(self.id),
            if self.passed { "PASS" } else { "FAIL" },
            self.seconds,
            self.detail
        )
    }
}

struct Outcome {
    passed: bool,
    detail: String,
    metrics: Vec<(String, f64)>,
    artifacts: Vec<Artifact>,
}

fn m(name: &str, v: f64) -> (String, f64) {
    (name.to_string(), v)
}

fn config(text: String) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(&text)
}

fn pick<T>(scale: Scale, quick: T, reduced: T, full: T) -> T {
    match scale {
        Scale::Quick => quick,
        Scale::Reduced => reduced,
        Scale::Full => full,
    }
}

fn c1(scale: Scale, seed: u64, runner: &Runner) -> Result<Outcome> {
    let (instances, directions) = pick(scale, (12, 2), (100, 4), (100, 8));
    let cfg = config(format!(
        r#"
name = "criterion1"
dim = 3
master_seed = {seed}
[params]
schedule = ["attention"]
[integrator]
scheme = "rk4"
substeps_per_layer = 8
[grad_check]
dims = [2, 3, 5]
contexts = [1, 8, 64]
layers = [1, 2, 4]
schedules = ["attention", "mlp", "mixed"]
directions = {directions}
random_instances = {instances}
"#
    ))?;
    let res = exp_grad_check(&cfg, runner)?;
    let worst = res.rows.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    let resolved: Vec<f64> = res
        .rows
        .iter()
        .filter(|r| !r.report.at_resolution_limit())
        .map(|r| r.report.max_rel_error / r.report.max_rel_error_refined)
        .collect();
    let exempt = res.rows.len() - resolved.len();
    let min_shrink = resolved.iter().copied().fold(f64::INFINITY, f64::min);
    let passed = worst <= 1e-3 && resolved.iter().all(|s| *s >= 2.0);
    Ok(Outcome {
        passed,
        detail: format!(
            "{} instances, max rel err {worst:.2e} (<= 1e-3), min shrink m->2m {} (>= 2), {exempt} at FD resolution limit",
            res.rows.len(),
            if resolved.is_empty() { "n/a".to_string() } else { format!("{min_shrink:.2}") }
        ),
        metrics: vec![m("max_rel_error", worst), m("min_shrink", min_shrink), m("exempt", exempt as f64)],
        artifacts: vec![res.artifact],
    })
}

fn c2(seed: u64) -> Result<Outcome> {
    let d = 3;
    let h = RngHandle::new(seed).named("criterion2");
    let mut r = h.named("theta").rng();
    let v = Mat::random_with_norm(d, d, 1.0, &mut r);
    let theta = ParameterPath::new(vec![LayerParams::Attention {
        q: Mat::zeros(d, d),
        k: Mat::random_with_norm(d, d, 1.0, &mut r),
        v: v.clone(),
    }])?;
    let pop = PopulationSpec::uniform_ball(d, 1.0);
    let mu0 = sample_ensemble(&pop, 16, &h.named("context"))?;
    let x0 = sample_ensemble(&pop, 1, &h.named("x0"))?.particle(0).to_vec();
    let shift = expm(&v).sub(&Mat::identity(d)).mul_vec(&mu0.mean());
    let exact: Vec<f64> = x0.iter().zip(&shift).map(|(a, b)| a + b).collect();
    let err = |m: usize| -> Result<f64> {
        let traj = integrate_forward(&x0, &mu0, &theta, &IntegratorConfig::rk4(m))?;
        Ok(dist(output_token(&traj), &exact))
    };
    let e64 = err(64)?;
    let (e4, e8, e16) = (err(4)?, err(8)?, err(16)?);
    let order = (e4 / e8).log2().min((e8 / e16).log2());
    Ok(Outcome {
        passed: e64 <= 1e-6 && order >= 3.0,
        detail: format!("error at m=64 {e64:.2e} (<= 1e-6), observed order {order:.2} (>= 3)"),
        metrics: vec![m("error_m64", e64), m("observed_order", order)],
        artifacts: Vec::new(),
    })
}

fn forward_config(name: &str, dim: usize, n_list: &str, n_ref: usize, repeats: usize, integrator: (&str, usize), w1: &str, seed: u64) -> Result<ExperimentConfig> {
    config(format!(
        r#"
name = "{name}"
dim = {dim}
n_list = {n_list}
n_ref = {n_ref}
repeats = {repeats}
master_seed = {seed}
[population]
kind = "uniform_ball"
radius = 1.0
[params]
schedule = ["attention"]
init_scale = 1.0
seed = {seed}
[integrator]
scheme = "{}"
substeps_per_layer = {}
[forward]
w1 = "{w1}"
"#,
        integrator.0, integrator.1
    ))
}

fn c3(scale: Scale, seed: u64, runner: &Runner) -> Result<Outcome> {
    let (n_list, n_ref, repeats, steps) = pick(
        scale,
        ("[4, 8, 16]", 128, 8, 2),
        ("[16, 32, 64, 128, 256, 512]", 4096, 16, 4),
        ("[16, 32, 64, 128, 256, 512]", 8192, 64, 8),
    );
    let cfg = forward_config("criterion3", 4, n_list, n_ref, repeats, ("rk4", steps), "initial_only", seed)?;
    let res = exp_forward_poc(&cfg, runner)?;
    let fit = res.fit_dev_x.as_ref().ok_or_else(|| CfmError::InvalidArgument("no fit".into()))?;
    Ok(Outcome {
        passed: (-0.65..=-0.35).contains(&fit.slope) && fit.r_squared >= 0.9,
        detail: format!(
            "slope {:.3} +- {:.3} in [-0.65, -0.35], r^2 {:.3} (>= 0.9), N_ref {n_ref}, {repeats} repeats",
            fit.slope, fit.slope_std_error, fit.r_squared
        ),
        metrics: vec![m("slope", fit.slope), m("r_squared", fit.r_squared), m("slope_std_error", fit.slope_std_error)],
        artifacts: vec![res.artifact],
    })
}

fn c4(scale: Scale, seed: u64, runner: &Runner) -> Result<Outcome> {
    let (n_list, n_ref, repeats) = pick(
        scale,
        ("[8, 16, 32]", 256, 8),
        ("[16, 32, 64, 128, 256, 512]", 4096, 16),
        ("[16, 32, 64, 128, 256, 512]", 4096, 64),
    );
    let cfg = forward_config("criterion4", 3, n_list, n_ref, repeats, ("euler", 1), "initial_only", seed)?;
    let res = exp_forward_poc(&cfg, runner)?;
    let fit = res.fit_w1_initial.as_ref().ok_or_else(|| CfmError::InvalidArgument("no fit".into()))?;
    Ok(Outcome {
        passed: (-0.45..=-0.22).contains(&fit.slope),
        detail: format!("slope {:.3} +- {:.3} in [-0.45, -0.22], N_ref {n_ref}, {repeats} repeats", fit.slope, fit.slope_std_error),
        metrics: vec![m("slope", fit.slope), m("r_squared", fit.r_squared)],
        artifacts: vec![res.artifact],
    })
}

fn backward_config(name: &str, n_list: &str, n_ref: usize, repeats: usize, iterations: usize, seed: u64) -> Result<ExperimentConfig> {
    config(format!(
        r#"
name = "{name}"
dim = 3
n_list = {n_list}
n_ref = {n_ref}
repeats = {repeats}
master_seed = {seed}
[params]
schedule = ["attention"]
init = "zero"
[integrator]
scheme = "euler"
substeps_per_layer = 1
[ogd]
eta = 0.05
lambda = "auto"
iterations = {iterations}
window_split = 50
"#
    ))
}

fn c5(scale: Scale, seed: u64, runner: &Runner) -> Result<Outcome> {
    let (n_list, n_ref, repeats, iterations, probe) = pick(scale, ("[4, 8, 16]", 128, 8, 120, 16), ("[16, 32, 64]", 512, 16, 500, 64), ("[16, 32, 64]", 512, 16, 500, 64));
    let cfg = backward_config("criterion5", n_list, n_ref, repeats, iterations, seed)?;
    let res = exp_backward_poc(&cfg, runner)?;
    let ratios: Vec<f64> = res.trials.iter().filter(|t| t.n == probe).filter_map(|t| t.uniformity_ratio).collect();
    let within = ratios.iter().filter(|r| **r <= 1.5).count();
    let need = (repeats * 14).div_ceil(16);
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    Ok(Outcome {
        passed: within >= need,
        detail: format!("n={probe}: ratio <= 1.5 in {within}/{} repeats (need {need}), worst {worst:.3}, lambda {:.3}", ratios.len(), res.lambda),
        metrics: vec![m("within", within as f64), m("worst_ratio", worst), m("lambda", res.lambda)],
        artifacts: vec![res.artifact],
    })
}

fn c6(scale: Scale, seed: u64, runner: &Runner) -> Result<Outcome> {
    let (n_list, n_ref, repeats, iterations) = pick(
        scale,
        ("[4, 8, 16]", 128, 8, 60),
        ("[16, 32, 64, 128, 256]", 2048, 8, 100),
        ("[16, 32, 64, 128, 256]", 2048, 16, 500),
    );
    let cfg = backward_config("criterion6", n_list, n_ref, repeats, iterations, seed)?;
    let res = exp_backward_poc(&cfg, runner)?;
    let fit = res.fit_sup_deviation.as_ref().ok_or_else(|| CfmError::InvalidArgument("no fit".into()))?;
    Ok(Outcome {
        passed: (-0.65..=-0.35).contains(&fit.slope),
        detail: format!(
            "slope {:.3} +- {:.3} in [-0.65, -0.35], r^2 {:.3}, K {iterations}, N_ref {n_ref}, {repeats} repeats",
            fit.slope, fit.slope_std_error, fit.r_squared
        ),
        metrics: vec![m("slope", fit.slope), m("r_squared", fit.r_squared)],
        artifacts: vec![res.artifact],
    })
}

fn audit_config(seed: u64) -> Result<ExperimentConfig> {
    config(format!(
        r#"
name = "criterion7"
dim = 3
master_seed = {seed}
[params]
schedule = ["attention", "attention"]
[integrator]
scheme = "rk4"
substeps_per_layer = 16
[audit]
samples = 10000
m_bound = 1.0
radius = 1.0
"#
    ))
}

fn c7_c8(id: u8, seed: u64, runner: &Runner) -> Result<Outcome> {
    let res = audit_bounds(&audit_config(seed)?, runner)?;
    let l = &res.ledger;
    let bounds: &[Bound] = if id == 7 {
        &[Bound::AttentionSpatial, Bound::AttentionWasserstein, Bound::MlpSpatial, Bound::SupportGrowth]
    } else {
        &[Bound::KernelIdentity]
    };
    let mut detail = Vec::new();
    let mut metrics = Vec::new();
    let mut passed = true;
    for &b in bounds {
        let e = l.entry(b);
        passed &= e.violations == 0 && (b == Bound::SupportGrowth || e.samples >= 10_000);
        detail.push(format!("{}: {} draws, {} violations, max ratio {:.3}", b.id(), e.samples, e.violations, e.max_ratio.unwrap_or(0.0)));
        metrics.push(m(&format!("{}_violations", b.id()), e.violations as f64));
        metrics.push(m(&format!("{}_max_observed", b.id()), e.max_observed));
    }
    Ok(Outcome {
        passed,
        detail: detail.join("; "),
        metrics,
        artifacts: if id == 7 { vec![res.artifact] } else { Vec::new() },
    })
}

fn random_ensemble(n: usize, d: usize, r: &mut impl Rng) -> Result<Ensemble> {
    Ensemble::new(d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn c9(seed: u64) -> Result<Outcome> {
    let h = RngHandle::new(seed).named("criterion9");
    let mut worst_oracle: f64 = 0.0;
    for i in 0..200u64 {
        let mut r = h.named("pairs").child(i).rng();
        let (n, d) = (r.random_range(1..=6), r.random_range(1..=3));
        let (a, b) = (random_ensemble(n, d, &mut r)?, random_ensemble(n, d, &mut r)?);
        worst_oracle = worst_oracle.max((w1(&a, &b)? - w1_permutation(&a, &b)).abs());
    }
    let mut worst_axiom: f64 = 0.0;
    for i in 0..200u64 {
        let mut r = h.named("triples").child(i).rng();
        let d = r.random_range(1..=3);
        let sizes = [r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8)];
        let [a, b, c] = sizes.map(|n| random_ensemble(n, d, &mut r));
        let (a, b, c) = (a?, b?, c?);
        let (ab, ba, bc, ac, aa) = (w1(&a, &b)?, w1(&b, &a)?, w1(&b, &c)?, w1(&a, &c)?, w1(&a, &a)?);
        worst_axiom = worst_axiom.max((ab - ba).abs()).max(aa.abs()).max(ac - ab - bc).max(-ab);
    }
    Ok(Outcome {
        passed: worst_oracle <= 1e-10 && worst_axiom <= 1e-12,
        detail: format!("max |exact - permutation| {worst_oracle:.1e} (<= 1e-10) on 200 pairs, worst axiom defect {worst_axiom:.1e} on 200 triples"),
        metrics: vec![m("oracle_gap", worst_oracle), m("axiom_defect", worst_axiom)],
        artifacts: Vec::new(),
    })
}

/// Quick-scale criteria run twice on one thread and once on `threads`,
/// compared file by file.
fn c10(seed: u64, threads: usize) -> Result<Outcome> {
    let render = |runner: &Runner| -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::new();
        for o in [c1(Scale::Quick, seed, runner)?, c3(Scale::Quick, seed, runner)?, c6(Scale::Quick, seed, runner)?] {
            for a in o.artifacts {
                out.push(a.raw.to_csv_bytes());
                out.push(a.summary.to_csv_bytes());
                out.push(serde_json::to_vec(&a.meta).expect("json"));
            }
        }
        Ok(out)
    };
    let one = Runner::new(1)?;
    let first = render(&one)?;
    let rerun = render(&one)?;
    let wide = render(&Runner::new(threads.max(2))?)?;
    let same_rerun = first == rerun;
    let same_threads = first == wide;
    Ok(Outcome {
        passed: same_rerun && same_threads,
        detail: format!(
            "{} files: rerun identical {same_rerun}, 1 vs {} threads identical {same_threads}",
            first.len(),
            threads.max(2)
        ),
        metrics: vec![m("rerun_identical", same_rerun as u8 as f64), m("threads_identical", same_threads as u8 as f64)],
        artifacts: Vec::new(),
    })
}

pub fn run_criterion(id: u8, scale: Scale, seed: u64, runner: &Runner) -> Result<CriterionResult> {
    let t = Instant::now();
    let outcome = match id {
        1 => c1(scale, seed, runner),
        2 => c2(seed),
        3 => c3(scale, seed, runner),
        4 => c4(scale, seed, runner),
        5 => c5(scale, seed, runner),
        6 => c6(scale, seed, runner),
        7 | 8 => c7_c8(id, seed, runner),
        9 => c9(seed),
        10 => c10(seed, runner.threads().max(8)),
        _ => return Err(CfmError::InvalidArgument(format!("unknown criterion {id}"))),
    };
    let seconds = t.elapsed().as_secs_f64();
    Ok(match outcome {
        Ok(o) => CriterionResult {
            id,
            passed: o.passed,
            detail: o.detail,
            metrics: o.metrics,
            seconds,
            artifacts: o.artifacts,
        },
        Err(e) if e.is_numerical() => return Err(e),
        Err(e) => CriterionResult {
            id,
            passed: false,
            detail: format!("error: {e}"),
            metrics: Vec::new(),
            seconds,
            artifacts: Vec::new(),
        },
    })
}

/// Runs the selected criteria in order, calling `report` after each one.
pub fn run_selftest(cfg: &SelftestConfig, runner: &Runner, mut report: impl FnMut(&CriterionResult)) -> Result<Vec<CriterionResult>> {
    let mut out = Vec::new();
    for id in cfg.selected() {
        let r = run_criterion(id, cfg.scale, cfg.master_seed, runner)?;
        report(&r);
        out.push(r);
    }
    Ok(out)
}

/// The verdict table; wall times are left out so the file is reproducible.
pub fn selftest_artifact(cfg: &SelftestConfig, results: &[CriterionResult]) -> Artifact {
    let mut raw = Table::new(&["criterion", "metric", "value"]);
    let mut summary = Table::new(&["criterion", "title", "passed", "detail"]);
    for r in results {
        for (k, v) in &r.metrics {
            raw.push(vec![(r.id as usize).into(), k.as_str().into(), (*v).into()]);
        }
        summary.push(vec![(r.id as usize).into(), title(r.id).into(), r.passed.into(), r.detail.as_str().into()]);
    }
    Artifact {
        experiment: "selftest",
        name: cfg.name.clone(),
        raw,
        summary,
        meta: meta_document("selftest", &cfg.name, cfg, json!({"master_seed": cfg.master_seed}), json!({})),
    }
}

/// Writes the artifacts of every criterion and the verdict table under `root`.
pub fn write_selftest(root: &Path, cfg: &SelftestConfig, results: &[CriterionResult]) -> Result<()> {
    for r in results {
        for a in &r.artifacts {
            a.write(root)?;
        }
    }
    selftest_artifact(cfg, results).write(root)?;
    Ok(())
}
