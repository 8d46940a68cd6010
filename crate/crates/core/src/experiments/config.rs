//! Flat TOML configuration. Every key is optional in the file; `resolve`
//! fills experiment-specific defaults and the resolved document is echoed
//! into every output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netlab::{Activation, Integrator, ModelKind, ModelSpec};
use crate::transport::{CSchedule, DriftSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    OdeVerify,
    ShellAudit,
    PdeScaling,
    DoubleDescent,
    Regimes,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::OdeVerify => "ode-verify",
            ExperimentKind::ShellAudit => "shell-audit",
            ExperimentKind::PdeScaling => "pde-scaling",
            ExperimentKind::DoubleDescent => "double-descent",
            ExperimentKind::Regimes => "regimes",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputDistribution {
    /// i.i.d. uniform on `[input_low, input_high]^d`.
    UniformBox,
    /// Equispaced points (one input dimension only).
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    /// `sin(π·frequency·Σ_j x_j)`
    Sine,
    /// Fixed random MLP drawn from `teacher_seed`.
    RandomMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    Power,
    Off,
}

/// As read from disk: everything optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub experiment: Option<ExperimentKind>,
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<String>,

    pub model_kind: Option<ModelKind>,
    pub layer_widths: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub feature_count: Option<usize>,
    pub init_scale: Option<f64>,
    pub zero_init: Option<bool>,

    pub input_distribution: Option<InputDistribution>,
    pub input_low: Option<f64>,
    pub input_high: Option<f64>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub teacher: Option<TeacherKind>,
    pub teacher_frequency: Option<f64>,
    pub teacher_widths: Option<Vec<usize>>,
    pub teacher_seed: Option<u64>,

    pub integrator: Option<Integrator>,
    pub dt: Option<f64>,
    pub steps: Option<usize>,
    pub stride: Option<usize>,
    pub rank_tol: Option<f64>,
    pub gap_floor_rel: Option<f64>,
    pub overlap_floor: Option<f64>,
    pub residual_floor: Option<f64>,

    pub shell_q: Option<f64>,
    pub shell_lambda0: Option<f64>,

    pub drift_b: Option<f64>,
    pub drift_schedule: Option<ScheduleKind>,
    pub drift_c0: Option<f64>,
    pub drift_alpha: Option<f64>,
    pub drift_k: Option<f64>,

    pub grid_lo: Option<f64>,
    pub grid_hi: Option<f64>,
    pub grid_cells_per_decade: Option<usize>,
    pub cfl_safety: Option<f64>,
    pub dissipation: Option<bool>,
    pub tau_min: Option<f64>,
    pub tau_max: Option<f64>,
    pub snapshots: Option<usize>,
    pub frontier_drop: Option<f64>,
    pub refine_factor: Option<usize>,
    pub tail_grid_hi: Option<f64>,
    pub tail_source_center: Option<f64>,
    pub tail_source_width: Option<f64>,
    pub tail_tau: Option<f64>,

    pub feature_ratios: Option<Vec<f64>>,
    pub dt_factor: Option<f64>,
    pub horizon: Option<f64>,
    pub record_points: Option<usize>,
    pub tail_alpha0: Option<i64>,
    pub prominence: Option<f64>,

    pub regime_bs: Option<Vec<f64>>,
    pub include_lazy: Option<bool>,
    pub pulse_center: Option<f64>,
    pub pulse_width: Option<f64>,
    pub critical_tau_end: Option<f64>,
    pub lazy_time: Option<f64>,
}

/// Fully resolved configuration; this is what gets echoed to
/// `config.resolved.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seeds: Vec<u64>,
    pub output_dir: String,

    pub model_kind: ModelKind,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub feature_count: usize,
    pub init_scale: f64,
    /// Start from `θ = 0` (the minimum-norm interpolant is then the limit).
    pub zero_init: bool,

    pub input_distribution: InputDistribution,
    pub input_low: f64,
    pub input_high: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub teacher: TeacherKind,
    pub teacher_frequency: f64,
    pub teacher_widths: Vec<usize>,
    pub teacher_seed: u64,

    pub integrator: Integrator,
    pub dt: f64,
    pub steps: usize,
    pub stride: usize,
    pub rank_tol: f64,
    pub gap_floor_rel: f64,
    pub overlap_floor: f64,
    pub residual_floor: f64,

    pub shell_q: f64,
    /// `None`: median retained eigenvalue at t=0 snapped to the q-grid.
    pub shell_lambda0: Option<f64>,

    pub drift_b: f64,
    pub drift_schedule: ScheduleKind,
    pub drift_c0: f64,
    pub drift_alpha: f64,
    pub drift_k: Option<f64>,

    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_cells_per_decade: usize,
    pub cfl_safety: f64,
    pub dissipation: bool,
    pub tau_min: f64,
    pub tau_max: f64,
    pub snapshots: usize,
    pub frontier_drop: f64,
    pub refine_factor: usize,
    pub tail_grid_hi: f64,
    pub tail_source_center: f64,
    pub tail_source_width: f64,
    pub tail_tau: f64,

    pub feature_ratios: Vec<f64>,
    pub dt_factor: f64,
    pub horizon: f64,
    pub record_points: usize,
    pub tail_alpha0: i64,
    pub prominence: f64,

    pub regime_bs: Vec<f64>,
    pub include_lazy: bool,
    pub pulse_center: f64,
    pub pulse_width: f64,
    pub critical_tau_end: f64,
    pub lazy_time: f64,
}

impl RawConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RawConfig::from_toml(&text)
    }

    /// Fill defaults. `kind` comes from the command line when the file does
    /// not name an experiment; a mismatch is a config error.
    pub fn resolve(self, kind: Option<ExperimentKind>) -> Result<ExperimentConfig> {
        let experiment = match (self.experiment, kind) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!(
                    "config is for '{}' but '{}' was requested",
                    a.name(),
                    b.name()
                )))
            }
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) => return Err(Error::Config("no experiment named".into())),
        };
        use ExperimentKind::*;
        let dd = experiment == DoubleDescent;
        let micro = matches!(experiment, OdeVerify | ShellAudit);

        let model_kind = self.model_kind.unwrap_or(if dd { ModelKind::RandomFeatures } else { ModelKind::Mlp });
        let input_dim_default = if dd { 2 } else { 1 };
        let layer_widths = self.layer_widths.unwrap_or_else(|| match model_kind {
            ModelKind::Mlp => vec![input_dim_default, 8, 1],
            ModelKind::RandomFeatures => vec![input_dim_default, 1],
        });
        let n_train = self.n_train.unwrap_or(if dd { 64 } else { 16 });

        let cfg = ExperimentConfig {
            experiment,
            seeds: self.seeds.unwrap_or_else(|| if dd { (0..5).collect() } else { vec![0] }),
            output_dir: self.output_dir.unwrap_or_else(|| format!("out/{}", experiment.name())),

            model_kind,
            layer_widths,
            activation: self.activation.unwrap_or(Activation::Tanh),
            feature_count: self.feature_count.unwrap_or(n_train),
            init_scale: self.init_scale.unwrap_or(1.0),
            zero_init: self.zero_init.unwrap_or(dd),

            input_distribution: self.input_distribution.unwrap_or(InputDistribution::UniformBox),
            input_low: self.input_low.unwrap_or(-1.0),
            input_high: self.input_high.unwrap_or(1.0),
            n_train,
            n_test: self.n_test.unwrap_or(if dd { 512 } else { 0 }),
            teacher: self.teacher.unwrap_or(TeacherKind::Sine),
            teacher_frequency: self.teacher_frequency.unwrap_or(1.0),
            teacher_widths: self.teacher_widths.unwrap_or_else(|| vec![input_dim_default, 16, 1]),
            teacher_seed: self.teacher_seed.unwrap_or(12345),

            integrator: self.integrator.unwrap_or(if micro { Integrator::Rk4 } else { Integrator::Euler }),
            dt: self.dt.unwrap_or(1e-3),
            steps: self.steps.unwrap_or(if micro { 5000 } else { 0 }),
            stride: self.stride.unwrap_or(50),
            rank_tol: self.rank_tol.unwrap_or(crate::operator::DEFAULT_RANK_TOL),
            gap_floor_rel: self.gap_floor_rel.unwrap_or(crate::operator::DEFAULT_GAP_FLOOR_REL),
            overlap_floor: self.overlap_floor.unwrap_or(crate::operator::DEFAULT_OVERLAP_FLOOR),
            residual_floor: self.residual_floor.unwrap_or(crate::modes::DEFAULT_RESIDUAL_FLOOR),

            shell_q: self.shell_q.unwrap_or(2.0),
            shell_lambda0: self.shell_lambda0,

            drift_b: self.drift_b.unwrap_or(3.0),
            drift_schedule: self.drift_schedule.unwrap_or(ScheduleKind::Constant),
            drift_c0: self.drift_c0.unwrap_or(50.0),
            drift_alpha: self.drift_alpha.unwrap_or(1.0),
            drift_k: self.drift_k,

            grid_lo: self.grid_lo.unwrap_or(1e-4),
            grid_hi: self.grid_hi.unwrap_or(10.0),
            grid_cells_per_decade: self.grid_cells_per_decade.unwrap_or(64),
            cfl_safety: self.cfl_safety.unwrap_or(0.9),
            dissipation: self.dissipation.unwrap_or(true),
            tau_min: self.tau_min.unwrap_or(1.0),
            tau_max: self.tau_max.unwrap_or(100.0),
            snapshots: self.snapshots.unwrap_or(17),
            frontier_drop: self.frontier_drop.unwrap_or((-1.0f64).exp()),
            refine_factor: self.refine_factor.unwrap_or(2),
            tail_grid_hi: self.tail_grid_hi.unwrap_or(2.0),
            tail_source_center: self.tail_source_center.unwrap_or(1.0),
            tail_source_width: self.tail_source_width.unwrap_or(0.05),
            tail_tau: self.tail_tau.unwrap_or(1000.0),

            feature_ratios: self.feature_ratios.unwrap_or_else(|| vec![0.5, 1.0, 2.0]),
            dt_factor: self.dt_factor.unwrap_or(0.5),
            horizon: self.horizon.unwrap_or(1e4),
            record_points: self.record_points.unwrap_or(400),
            tail_alpha0: self.tail_alpha0.unwrap_or(0),
            prominence: self.prominence.unwrap_or(0.01),

            regime_bs: self.regime_bs.unwrap_or_else(|| vec![0.5, 1.0, 3.0]),
            include_lazy: self.include_lazy.unwrap_or(true),
            pulse_center: self.pulse_center.unwrap_or(1.0),
            pulse_width: self.pulse_width.unwrap_or(0.05),
            critical_tau_end: self.critical_tau_end.unwrap_or(2.5),
            lazy_time: self.lazy_time.unwrap_or(1.0),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, kind: Option<ExperimentKind>) -> Result<Self> {
        RawConfig::from_toml(text)?.resolve(kind)
    }

    pub fn load(path: &Path, kind: Option<ExperimentKind>) -> Result<Self> {
        RawConfig::load(path)?.resolve(kind)
    }

    pub fn validate(&self) -> Result<()> {
        use ExperimentKind::*;
        if self.seeds.is_empty() {
            return Err(bad("seeds must not be empty"));
        }
        if matches!(self.experiment, OdeVerify | ShellAudit | DoubleDescent) {
            self.model_spec(self.seeds[0], self.feature_count)
                .validate()
                .map_err(|e| bad(e.to_string()))?;
            if self.n_train < 2 {
                return Err(bad("n_train must be at least 2"));
            }
            if !(self.input_high > self.input_low) {
                return Err(bad("input_high must exceed input_low"));
            }
            if self.input_distribution == InputDistribution::Grid && self.layer_widths[0] != 1 {
                return Err(bad("grid inputs need input dimension 1"));
            }
            if self.teacher == TeacherKind::RandomMlp && self.teacher_widths.first() != self.layer_widths.first() {
                return Err(bad("teacher_widths must start with the model input dimension"));
            }
        }
        match self.experiment {
            OdeVerify | ShellAudit => {
                if !(self.dt > 0.0) {
                    return Err(bad("dt must be positive"));
                }
                if self.stride == 0 || self.steps < 2 * self.stride {
                    return Err(bad("need stride ≥ 1 and steps ≥ 2·stride"));
                }
                if !(self.shell_q > 1.0) {
                    return Err(bad("shell_q must exceed 1"));
                }
                if matches!(self.shell_lambda0, Some(l) if !(l > 0.0)) {
                    return Err(bad("shell_lambda0 must be positive"));
                }
                if !(self.overlap_floor >= 0.0 && self.overlap_floor <= 1.0) {
                    return Err(bad("overlap_floor must lie in [0,1]"));
                }
            }
            DoubleDescent => {
                if self.n_test == 0 {
                    return Err(bad("double-descent needs n_test ≥ 1"));
                }
                if self.feature_ratios.is_empty() || self.feature_ratios.iter().any(|r| !(*r > 0.0)) {
                    return Err(bad("feature_ratios must be positive and non-empty"));
                }
                if !(self.dt_factor > 0.0 && self.dt_factor < 2.0) {
                    return Err(bad("dt_factor must lie in (0, 2) for a stable Euler step"));
                }
                if !(self.horizon > 0.0) || self.record_points < 2 {
                    return Err(bad("horizon must be positive and record_points ≥ 2"));
                }
            }
            PdeScaling | Regimes => {
                if !(self.grid_lo > 0.0 && self.grid_hi > self.grid_lo) || self.grid_cells_per_decade < 2 {
                    return Err(bad("grid needs 0 < grid_lo < grid_hi and ≥ 2 cells per decade"));
                }
                if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
                    return Err(bad("cfl_safety must lie in (0, 1]"));
                }
                if !(self.tau_min > 0.0 && self.tau_max > self.tau_min) || self.snapshots < 8 {
                    return Err(bad("need 0 < tau_min < tau_max and ≥ 8 snapshots"));
                }
                if !(self.frontier_drop > 0.0 && self.frontier_drop < 1.0) {
                    return Err(bad("frontier_drop must lie in (0,1)"));
                }
                if self.experiment == PdeScaling {
                    self.drift().map_err(|e| bad(e.to_string()))?;
                    if self.refine_factor == 0 {
                        return Err(bad("refine_factor must be ≥ 1"));
                    }
                }
                if self.experiment == Regimes && self.regime_bs.iter().any(|b| !(*b > 0.0)) {
                    return Err(bad("regime_bs must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, seed: u64, feature_count: usize) -> ModelSpec {
        ModelSpec {
            kind: self.model_kind,
            layer_widths: self.layer_widths.clone(),
            activation: self.activation,
            feature_count,
            init_scale: self.init_scale,
            seed,
        }
    }

    pub fn drift(&self) -> Result<DriftSpec> {
        let schedule = match self.drift_schedule {
            ScheduleKind::Constant => CSchedule::Constant { c0: self.drift_c0 },
            ScheduleKind::Power => CSchedule::Power { c0: self.drift_c0, alpha: self.drift_alpha },
            ScheduleKind::Off => CSchedule::Off,
        };
        let mut d = DriftSpec::new(self.drift_b, schedule)?;
        d.k = self.drift_k;
        d.validate()?;
        Ok(d)
    }

    /// Copy with a single seed (CLI `--seed`).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }
}
