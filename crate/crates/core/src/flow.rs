//! Forward integration of the coupled token/particle system
//!
//! ```text
//! dx/ds   = V(x, mu_s; theta(s))
//! dz_i/ds = V(z_i, mu_s; theta(s)),   mu_s = (1/n) sum_i delta_{z_i(s)}
//! ```
//!
//! over depth `s in [0, 1]`. Layer `l` of the path occupies `[l/L, (l+1)/L)`
//! and is resolved with `m` fixed steps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::csv::CsvWriter;
use crate::ensemble::Ensemble;
use crate::error::{check_dim, CfmError, Result};
use crate::linalg::all_finite;
use crate::params::{LayerParams, ParameterPath};
use crate::velocity::{eval_field, FieldWorkspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub substeps_per_layer: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self::rk4(8)
    }
}

impl IntegratorConfig {
    pub fn rk4(m: usize) -> Self {
        Self {
            scheme: Scheme::Rk4,
            substeps_per_layer: m,
        }
    }

    pub fn euler(m: usize) -> Self {
        Self {
            scheme: Scheme::Euler,
            substeps_per_layer: m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps_per_layer == 0 {
            return Err(CfmError::InvalidArgument("substeps_per_layer must be >= 1".into()));
        }
        Ok(())
    }

    /// Same scheme with twice the substeps.
    pub fn refined(&self) -> Self {
        Self {
            scheme: self.scheme,
            substeps_per_layer: 2 * self.substeps_per_layer,
        }
    }

    pub fn num_steps(&self, layers: usize) -> usize {
        layers * self.substeps_per_layer
    }

    pub fn step_size(&self, layers: usize) -> f64 {
        1.0 / self.num_steps(layers) as f64
    }
}

/// Intermediate RK4 stage states of one step, each laid out as token then
/// particles: `Y2 = y + h/2 k1`, `Y3 = y + h/2 k2`, `Y4 = y + h k3`.
#[derive(Debug, Clone)]
pub struct StageStates {
    pub y2: Vec<f64>,
    pub y3: Vec<f64>,
    pub y4: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: Vec<f64>,
    pub x_states: Vec<Vec<f64>>,
    pub particle_states: Vec<Ensemble>,
    /// One entry per step for RK4, empty for Euler.
    pub stage_states: Vec<StageStates>,
    /// Layer active on step `k` (between `grid[k]` and `grid[k + 1]`).
    pub layer_index: Vec<usize>,
    pub config: IntegratorConfig,
}

impl Trajectory {
    pub fn num_steps(&self) -> usize {
        self.layer_index.len()
    }

    pub fn dim(&self) -> usize {
        self.x_states[0].len()
    }

    pub fn num_particles(&self) -> usize {
        self.particle_states[0].len()
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.num_steps() as f64
    }

    /// Largest particle norm at each grid point.
    pub fn max_particle_norms(&self) -> Vec<f64> {
        self.particle_states.iter().map(Ensemble::max_norm).collect()
    }

    /// Rows `(step, s, kind, particle_index, coord_0..)`; the token row leaves
    /// `particle_index` empty.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let d = self.dim();
        let mut csv = CsvWriter::new(out);
        let mut header = vec!["step".to_string(), "s".into(), "kind".into(), "particle_index".into()];
        header.extend((0..d).map(|c| format!("coord_{c}")));
        csv.header(&header)?;
        for (k, s) in self.grid.iter().enumerate() {
            csv.row()
                .int(k as i64)
                .real(*s)
                .text("token")
                .text("")
                .reals(&self.x_states[k])
                .finish()?;
            for (i, z) in self.particle_states[k].iter().enumerate() {
                csv.row()
                    .int(k as i64)
                    .real(*s)
                    .text("particle")
                    .int(i as i64)
                    .reals(z)
                    .finish()?;
            }
        }
        csv.flush()
    }
}

/// State-space right-hand side `f(y)` for `y = (x, z_1, .., z_n)`.
struct Field<'a> {
    d: usize,
    ws: FieldWorkspace,
    layer: &'a LayerParams,
}

impl<'a> Field<'a> {
    fn eval(&mut self, y: &[f64], out: &mut [f64]) {
        let d = self.d;
        let mu = Ensemble::from_raw(d, y[d..].to_vec());
        let (ox, oz) = out.split_at_mut(d);
        eval_field(self.layer, &y[..d], &mu, ox, oz, &mut self.ws);
    }
}

fn lincomb(y: &[f64], h: f64, k: &[f64], out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(y).zip(k) {
        *o = a + h * b;
    }
}

pub fn integrate_forward(x0: &[f64], mu0: &Ensemble, theta: &ParameterPath, cfg: &IntegratorConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if mu0.is_empty() {
        return Err(CfmError::EmptyEnsemble);
    }
    let d = theta.dim();
    check_dim(d, x0.len(), "initial token")?;
    check_dim(d, mu0.dim(), "initial ensemble")?;

    let layers = theta.num_layers();
    let m = cfg.substeps_per_layer;
    let steps = cfg.num_steps(layers);
    let h = cfg.step_size(layers);
    let size = (mu0.len() + 1) * d;

    let mut y = Vec::with_capacity(size);
    y.extend_from_slice(x0);
    y.extend_from_slice(mu0.coords());

    let mut grid = Vec::with_capacity(steps + 1);
    let mut x_states = Vec::with_capacity(steps + 1);
    let mut particle_states = Vec::with_capacity(steps + 1);
    let mut stage_states = Vec::new();
    let mut layer_index = Vec::with_capacity(steps);
    grid.push(0.0);
    x_states.push(x0.to_vec());
    particle_states.push(mu0.clone());

    let mut k1 = vec![0.0; size];
    let mut k2 = vec![0.0; size];
    let mut k3 = vec![0.0; size];
    let mut k4 = vec![0.0; size];
    let mut ws = FieldWorkspace::default();

    for step in 0..steps {
        let l = step / m;
        let mut field = Field {
            d,
            ws: std::mem::take(&mut ws),
            layer: theta.layer(l),
        };
        match cfg.scheme {
            Scheme::Euler => {
                field.eval(&y, &mut k1);
                for (yi, ki) in y.iter_mut().zip(&k1) {
                    *yi += h * ki;
                }
            }
            Scheme::Rk4 => {
                let mut y2 = vec![0.0; size];
                let mut y3 = vec![0.0; size];
                let mut y4 = vec![0.0; size];
                field.eval(&y, &mut k1);
                lincomb(&y, 0.5 * h, &k1, &mut y2);
                field.eval(&y2, &mut k2);
                lincomb(&y, 0.5 * h, &k2, &mut y3);
                field.eval(&y3, &mut k3);
                lincomb(&y, h, &k3, &mut y4);
                field.eval(&y4, &mut k4);
                for i in 0..size {
                    y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                stage_states.push(StageStates { y2, y3, y4 });
            }
        }
        ws = field.ws;
        if !all_finite(&y) {
            return Err(CfmError::NonFiniteState { step, layer: l });
        }
        layer_index.push(l);
        grid.push((step + 1) as f64 / steps as f64);
        x_states.push(y[..d].to_vec());
        particle_states.push(Ensemble::from_raw(d, y[d..].to_vec()));
    }

    Ok(Trajectory {
        grid,
        x_states,
        particle_states,
        stage_states,
        layer_index,
        config: *cfg,
    })
}

pub fn output_token(traj: &Trajectory) -> &[f64] {
    traj.x_states.last().expect("trajectory has at least one state")
}

/// `sup_s |x_s - x'_s|` over a common grid.
pub fn sup_token_deviation(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.grid.len() != b.grid.len() {
        return Err(CfmError::InvalidArgument(format!(
            "trajectories on different grids ({} vs {} points)",
            a.grid.len(),
            b.grid.len()
        )));
    }
    Ok(a.x_states
        .iter()
        .zip(&b.x_states)
        .map(|(u, v)| crate::linalg::dist(u, v))
        .fold(0.0, f64::max))
}
