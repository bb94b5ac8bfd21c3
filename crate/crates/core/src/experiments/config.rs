//! TOML experiment configuration. Unknown keys are rejected everywhere.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{CfmError, Result};
use crate::flow::IntegratorConfig;
use crate::params::{Family, ParameterPath};
use crate::population::PopulationSpec;
use crate::rng::RngHandle;
use crate::train::{Coupling, StreamMode, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Forward,
    GradCheck,
    Ogd,
    ForwardPoc,
    BackwardPoc,
    Stability,
    LipschitzAudit,
    SupportGrowth,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Forward,
        ExperimentKind::GradCheck,
        ExperimentKind::Ogd,
        ExperimentKind::ForwardPoc,
        ExperimentKind::BackwardPoc,
        ExperimentKind::Stability,
        ExperimentKind::LipschitzAudit,
        ExperimentKind::SupportGrowth,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ExperimentKind::Forward => "forward",
            ExperimentKind::GradCheck => "grad_check",
            ExperimentKind::Ogd => "ogd",
            ExperimentKind::ForwardPoc => "forward_poc",
            ExperimentKind::BackwardPoc => "backward_poc",
            ExperimentKind::Stability => "stability",
            ExperimentKind::LipschitzAudit => "lipschitz_audit",
            ExperimentKind::SupportGrowth => "support_growth",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.id() == id)
    }

    fn fits_rates(self) -> bool {
        matches!(self, ExperimentKind::ForwardPoc | ExperimentKind::BackwardPoc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PopulationConfig {
    UniformBall {
        #[serde(default = "one")]
        radius: f64,
    },
    TruncatedGaussian {
        sigma: f64,
        #[serde(default = "one")]
        radius: f64,
    },
    Mixture {
        centers: Vec<Vec<f64>>,
        spread: f64,
        #[serde(default = "one")]
        radius: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig::UniformBall { radius: 1.0 }
    }
}

impl PopulationConfig {
    pub fn spec(&self, dim: usize) -> Result<PopulationSpec> {
        let spec = match self {
            PopulationConfig::UniformBall { radius } => PopulationSpec::uniform_ball(dim, *radius),
            PopulationConfig::TruncatedGaussian { sigma, radius } => PopulationSpec::truncated_gaussian(dim, *sigma, *radius),
            PopulationConfig::Mixture { centers, spread, radius } => {
                if centers.iter().any(|c| c.len() != dim) {
                    return Err(CfmError::InvalidArgument(format!("mixture centers must have dimension {dim}")));
                }
                PopulationSpec::mixture(centers.clone(), *spread, *radius)
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn radius(&self) -> f64 {
        match self {
            PopulationConfig::UniformBall { radius }
            | PopulationConfig::TruncatedGaussian { radius, .. }
            | PopulationConfig::Mixture { radius, .. } => *radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub schedule: Vec<Family>,
    #[serde(default = "random_init")]
    pub init: Init,
    /// Frobenius norm of every random block.
    #[serde(default = "one")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn random_init() -> Init {
    Init::Random
}

impl ParamsConfig {
    pub fn build(&self, dim: usize) -> Result<ParameterPath> {
        match self.init {
            Init::Zero => ParameterPath::zeros(&self.schedule, dim),
            Init::Random => ParameterPath::random(&self.schedule, dim, self.init_scale, &mut RngHandle::new(self.seed).named("params").rng()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W1Mode {
    /// Exact W1 at every grid point.
    Exact,
    /// Sliced W1 at every grid point, clearly labeled as such.
    Sliced,
    /// Exact W1 between the initial measures only.
    InitialOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardSettings {
    #[serde(default = "exact_mode")]
    pub w1: W1Mode,
    #[serde(default = "independent")]
    pub coupling: Coupling,
    /// Token for the single-trajectory run; drawn from the population when absent.
    #[serde(default)]
    pub token: Option<Vec<f64>>,
}

fn exact_mode() -> W1Mode {
    W1Mode::Exact
}

fn independent() -> Coupling {
    Coupling::Independent
}

impl Default for ForwardSettings {
    fn default() -> Self {
        Self {
            w1: W1Mode::Exact,
            coupling: Coupling::Independent,
            token: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaKeyword {
    /// `factor * G_hat` from a warm-up probe.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSetting {
    Value(f64),
    Keyword(LambdaKeyword),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OgdSettings {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "zero_lambda")]
    pub lambda: LambdaSetting,
    /// `lambda = lambda_factor * G_hat` for `lambda = "auto"`.
    #[serde(default = "four")]
    pub lambda_factor: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    pub iterations: usize,
    /// Defaults to the experiment's integrator.
    #[serde(default)]
    pub integrator: Option<IntegratorConfig>,
    #[serde(default = "independent")]
    pub coupling: Coupling,
    #[serde(default = "default_target")]
    pub target: Target,
    #[serde(default = "iid")]
    pub stream: StreamMode,
    /// Split between the early and late windows of the uniformity ratio.
    #[serde(default = "default_split")]
    pub window_split: usize,
}

fn default_eta() -> f64 {
    0.05
}

fn zero_lambda() -> LambdaSetting {
    LambdaSetting::Value(0.0)
}

fn four() -> f64 {
    4.0
}

fn default_warmup() -> usize {
    20
}

fn default_target() -> Target {
    Target::Scaled { factor: -1.0 }
}

fn iid() -> StreamMode {
    StreamMode::Iid
}

fn default_split() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySettings {
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_rungs")]
    pub rungs: usize,
    #[serde(default = "default_base_delta")]
    pub base_delta: f64,
    /// Context size; defaults to the first entry of `n_list`.
    #[serde(default)]
    pub n: Option<usize>,
}

fn default_instances() -> usize {
    4
}

fn default_rungs() -> usize {
    6
}

fn default_base_delta() -> f64 {
    0.1
}

impl Default for StabilitySettings {
    fn default() -> Self {
        Self {
            instances: 4,
            rungs: 6,
            base_delta: 0.1,
            n: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSettings {
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Frobenius bound `M` on every parameter block.
    #[serde(default = "one")]
    pub m_bound: f64,
    /// Support radius `R`.
    #[serde(default = "one")]
    pub radius: f64,
    #[serde(default = "default_max_particles")]
    pub max_particles: usize,
    /// Instances integrated for the support-growth bound.
    #[serde(default = "default_flow_instances")]
    pub flow_instances: usize,
    /// Instances used to measure the gradient bound.
    #[serde(default = "default_gradient_instances")]
    pub gradient_instances: usize,
}

fn default_samples() -> usize {
    10_000
}

fn default_max_particles() -> usize {
    8
}

fn default_flow_instances() -> usize {
    200
}

fn default_gradient_instances() -> usize {
    64
}

impl Default for AuditSettings {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            m_bound: 1.0,
            radius: 1.0,
            max_particles: default_max_particles(),
            flow_instances: default_flow_instances(),
            gradient_instances: default_gradient_instances(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportSettings {
    #[serde(default = "default_support_instances")]
    pub instances: usize,
    /// Particles per instance; defaults to the first entry of `n_list`.
    #[serde(default)]
    pub n: Option<usize>,
}

fn default_support_instances() -> usize {
    32
}

impl Default for SupportSettings {
    fn default() -> Self {
        Self { instances: 32, n: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Attention,
    Mlp,
    /// Attention and MLP layers alternating, attention first.
    Mixed,
}

impl ScheduleKind {
    pub fn schedule(self, layers: usize) -> Vec<Family> {
        (0..layers)
            .map(|l| match self {
                ScheduleKind::Attention => Family::Attention,
                ScheduleKind::Mlp => Family::Mlp,
                ScheduleKind::Mixed if l % 2 == 0 => Family::Attention,
                ScheduleKind::Mixed => Family::Mlp,
            })
            .collect()
    }

    pub fn id(self) -> &'static str {
        match self {
            ScheduleKind::Attention => "attention",
            ScheduleKind::Mlp => "mlp",
            ScheduleKind::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSettings {
    #[serde(default = "all_schedules")]
    pub schedules: Vec<ScheduleKind>,
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    /// Context sizes of the sweep; `n_list` is not used here.
    #[serde(default = "default_grad_n")]
    pub contexts: Vec<usize>,
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "default_directions")]
    pub directions: usize,
    /// When positive, draw this many random cells (dimension, layers,
    /// context size, schedule) instead of the full sweep.
    #[serde(default)]
    pub random_instances: usize,
}

fn all_schedules() -> Vec<ScheduleKind> {
    vec![ScheduleKind::Attention, ScheduleKind::Mlp, ScheduleKind::Mixed]
}

fn default_layers() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

fn default_grad_n() -> Vec<usize> {
    vec![1, 8, 64]
}

fn default_dims() -> Vec<usize> {
    vec![3]
}

fn default_directions() -> usize {
    4
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            schedules: all_schedules(),
            layers: default_layers(),
            contexts: default_grad_n(),
            dims: default_dims(),
            directions: default_directions(),
            random_instances: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; must agree with the subcommand when given.
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    /// Output file stem; defaults to `default`.
    #[serde(default)]
    pub name: Option<String>,
    pub dim: usize,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
    #[serde(default = "default_n_ref")]
    pub n_ref: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Not echoed into meta files so that outputs do not depend on where they are written.
    #[serde(default, skip_serializing)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub population: PopulationConfig,
    pub params: ParamsConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub forward: ForwardSettings,
    #[serde(default)]
    pub ogd: Option<OgdSettings>,
    #[serde(default)]
    pub stability: StabilitySettings,
    #[serde(default)]
    pub audit: AuditSettings,
    #[serde(default)]
    pub support: SupportSettings,
    #[serde(default)]
    pub grad_check: GradCheckSettings,
}

fn default_n_list() -> Vec<usize> {
    vec![16, 32, 64, 128, 256, 512]
}

fn default_n_ref() -> usize {
    8192
}

fn default_repeats() -> usize {
    64
}

fn invalid(msg: String) -> CfmError {
    CfmError::InvalidArgument(msg)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(format!("config: {}", e.message())))
    }

    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or("default")
    }

    pub fn population_spec(&self) -> Result<PopulationSpec> {
        self.population.spec(self.dim)
    }

    pub fn theta(&self) -> Result<ParameterPath> {
        self.params.build(self.dim)
    }

    pub fn master_rng(&self, kind: ExperimentKind) -> RngHandle {
        RngHandle::new(self.master_seed).named(kind.id())
    }

    pub fn ogd(&self) -> Result<&OgdSettings> {
        self.ogd.as_ref().ok_or_else(|| invalid("this experiment needs an [ogd] section".into()))
    }

    /// Checks the invariants that do not need any computation.
    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        if let Some(k) = self.experiment {
            if k != kind {
                return Err(invalid(format!("config is for `{}`, not `{}`", k.id(), kind.id())));
            }
        }
        if self.dim == 0 {
            return Err(invalid("dim must be >= 1".into()));
        }
        if self.n_list.is_empty() || self.n_list[0] == 0 || self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!("n_list must be positive and strictly increasing, got {:?}", self.n_list)));
        }
        if self.params.schedule.is_empty() {
            return Err(invalid("params.schedule must name at least one layer".into()));
        }
        if !(self.params.init_scale >= 0.0 && self.params.init_scale.is_finite()) {
            return Err(invalid("params.init_scale must be finite and >= 0".into()));
        }
        self.integrator.validate()?;
        self.population_spec()?;
        if let Some(name) = &self.name {
            if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
                return Err(invalid(format!("invalid output name `{name}`")));
            }
        }
        let n_max = *self.n_list.last().unwrap();
        if kind.fits_rates() {
            if self.repeats < 8 {
                return Err(invalid(format!("rate fits need repeats >= 8, got {}", self.repeats)));
            }
            if self.n_list.len() < 3 {
                return Err(invalid("rate fits need at least 3 context sizes".into()));
            }
            if self.n_ref < n_max {
                return Err(invalid(format!("n_ref = {} is below the largest n = {n_max}", self.n_ref)));
            }
        }
        let differentiable = self.params.schedule.iter().all(|f| f.is_differentiable());
        match kind {
            ExperimentKind::BackwardPoc | ExperimentKind::Ogd => {
                let ogd = self.ogd()?;
                if !differentiable {
                    return Err(invalid("training needs a differentiable schedule".into()));
                }
                if kind == ExperimentKind::BackwardPoc && ogd.coupling == Coupling::Independent && self.n_ref < 8 * n_max {
                    return Err(invalid(format!("n_ref = {} must be >= 8 * {n_max}", self.n_ref)));
                }
                if !(ogd.eta > 0.0) {
                    return Err(invalid("ogd.eta must be positive".into()));
                }
                if ogd.iterations == 0 && kind == ExperimentKind::BackwardPoc {
                    return Err(invalid("ogd.iterations must be >= 1".into()));
                }
                if let Some(i) = &ogd.integrator {
                    i.validate()?;
                }
            }
            ExperimentKind::Stability | ExperimentKind::GradCheck if kind == ExperimentKind::Stability && !differentiable => {
                return Err(invalid("stability needs a differentiable schedule".into()));
            }
            ExperimentKind::LipschitzAudit if self.audit.samples < 10_000 => {
                return Err(invalid(format!("audit.samples must be >= 10000, got {}", self.audit.samples)));
            }
            ExperimentKind::SupportGrowth if self.params.schedule.iter().any(|f| *f != Family::Attention) => {
                return Err(invalid("support growth needs an attention-only schedule".into()));
            }
            ExperimentKind::Forward => {
                if let Some(t) = &self.forward.token {
                    if t.len() != self.dim {
                        return Err(invalid(format!("forward.token must have {} entries", self.dim)));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}
