//! Strict TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use stagger_core::autodiff::ConvPadding;
use stagger_core::field::{GridSpec, StaggerFactors};
use stagger_core::model::{AuxChannelSpec, ModelSpec};
use stagger_core::physics::{
    DiffusionBoundary, DiffusionResidualConfig, DiffusionScheme, NsBoundary, NsResidualConfig, ResidualOp,
};
use stagger_core::solvers::{equation_grid, periodic_forcing, Equation, OracleConfig};
use stagger_core::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub stagger: FactorsConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub aux: AuxChannelSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub equation: Equation,
    pub height: usize,
    pub width: usize,
    pub dt: f64,
    /// Diffusion only.
    #[serde(default = "default_scheme")]
    pub scheme: DiffusionScheme,
    /// Navier-Stokes only.
    #[serde(default = "default_reynolds")]
    pub reynolds: f64,
    /// Periodic Navier-Stokes only: apply the fixed sinusoidal forcing.
    #[serde(default = "default_true")]
    pub forcing: bool,
    /// Lid-driven cavity only.
    #[serde(default = "default_lid_speed")]
    pub lid_speed: f64,
    /// Overrides the reference solver's default burn-in time.
    #[serde(default)]
    pub burn_in: Option<f64>,
    /// Amplitude of the random initial conditions.
    #[serde(default = "default_one")]
    pub ic_scale: f64,
}

fn default_scheme() -> DiffusionScheme {
    DiffusionScheme::CrankNicolson
}

fn default_reynolds() -> f64 {
    1000.0
}

fn default_true() -> bool {
    true
}

fn default_lid_speed() -> f64 {
    1.0
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorsConfig {
    pub s_h: usize,
    pub s_w: usize,
    pub s_t: usize,
}

impl Default for FactorsConfig {
    fn default() -> Self {
        Self { s_h: 1, s_w: 1, s_t: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_channels: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_padding")]
    pub padding: ConvPadding,
    #[serde(default = "default_true")]
    pub predict_delta: bool,
    #[serde(default = "default_one")]
    pub state_scale: f64,
}

fn default_depth() -> usize {
    2
}

fn default_kernel() -> usize {
    3
}

fn default_padding() -> ConvPadding {
    ConvPadding::Periodic
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub trajectories: usize,
    /// Oracle steps per trajectory.
    pub steps: usize,
    #[serde(default = "default_stride")]
    pub window_stride: usize,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Target length `L_T` in fine time steps.
    pub horizon: usize,
    /// Frames reported as Error-k and saved as snapshots.
    pub checkpoints: Vec<usize>,
    #[serde(default = "default_ics")]
    pub initial_conditions: usize,
}

fn default_ics() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Ensemble steps between the optimized input and the target.
    pub blocks: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            blocks: 10,
            steps: 500,
            lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Largest transfer-matrix power in the bandwidth study.
    pub max_power: usize,
    /// Samples of state pairs for the block least-squares comparison.
    pub samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            max_power: 24,
            samples: 64,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// Everything derived from the config is checked here, before any output is written.
    pub fn validate(&self) -> Result<(), CliError> {
        let layout = self.factors()?;
        layout.check_grid(&self.grid()?)?;
        self.oracle()?;
        self.train.validate()?;
        self.model_spec(1)?.validate()?;
        let p = &self.problem;
        if p.equation == Equation::NsLidDriven && self.model.padding == ConvPadding::Periodic {
            return Err(CliError::Config("the lid-driven cavity needs zero padding".into()));
        }
        if !(p.ic_scale > 0.0 && p.ic_scale.is_finite()) {
            return Err(CliError::Config(format!("ic_scale must be positive, got {}", p.ic_scale)));
        }
        if self.data.trajectories == 0 || self.data.steps + 1 < layout.s_t {
            return Err(CliError::Config("data needs at least one trajectory of s_T frames".into()));
        }
        let e = &self.evaluate;
        if e.horizon == 0 || e.initial_conditions == 0 {
            return Err(CliError::Config("evaluate.horizon and evaluate.initial_conditions must be at least 1".into()));
        }
        if let Some(k) = e.checkpoints.iter().find(|k| **k == 0 || **k > e.horizon) {
            return Err(CliError::Config(format!("checkpoint {k} lies outside 1..={}", e.horizon)));
        }
        if self.control.blocks == 0 || !(self.control.lr > 0.0) {
            return Err(CliError::Config("control.blocks and control.lr must be positive".into()));
        }
        if self.analysis.max_power == 0 || self.analysis.samples == 0 {
            return Err(CliError::Config("analysis.max_power and analysis.samples must be positive".into()));
        }
        Ok(())
    }

    pub fn factors(&self) -> Result<StaggerFactors, CliError> {
        let s = self.stagger;
        Ok(StaggerFactors::new(s.s_h, s.s_w, s.s_t)?)
    }

    pub fn grid(&self) -> Result<GridSpec, CliError> {
        Ok(equation_grid(self.problem.equation, self.problem.height, self.problem.width)?)
    }

    pub fn residual_op(&self) -> Result<ResidualOp, CliError> {
        let p = &self.problem;
        let grid = self.grid()?;
        Ok(match p.equation {
            Equation::Diffusion => ResidualOp::Diffusion(DiffusionResidualConfig {
                dx: grid.dx,
                dt: p.dt,
                scheme: p.scheme,
                boundary: DiffusionBoundary::Periodic,
            }),
            Equation::NsPeriodic => ResidualOp::Ns(NsResidualConfig {
                dx: grid.dx,
                dt: p.dt,
                reynolds: p.reynolds,
                forcing: if p.forcing { Some(periodic_forcing(grid)?) } else { None },
                boundary: NsBoundary::Periodic,
            }),
            Equation::NsLidDriven => ResidualOp::Ns(NsResidualConfig {
                dx: grid.dx,
                dt: p.dt,
                reynolds: p.reynolds,
                forcing: None,
                boundary: NsBoundary::LidDriven { lid_speed: p.lid_speed },
            }),
        })
    }

    pub fn oracle(&self) -> Result<OracleConfig, CliError> {
        let mut oracle = OracleConfig::new(self.residual_op()?)?;
        if let Some(b) = self.problem.burn_in {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(CliError::Config(format!("burn_in must be non-negative, got {b}")));
            }
            oracle.burn_in = b;
        }
        Ok(oracle)
    }

    pub fn model_spec(&self, in_channels: usize) -> Result<ModelSpec, CliError> {
        let m = self.model;
        let spec = ModelSpec {
            in_channels,
            hidden_channels: m.hidden_channels,
            depth: m.depth,
            kernel_size: m.kernel_size,
            padding: m.padding,
            predict_delta: m.predict_delta,
            state_scale: m.state_scale,
        };
        spec.validate()?;
        Ok(spec)
    }
}
