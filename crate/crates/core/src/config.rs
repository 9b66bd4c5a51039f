//! Flat key-value run configuration shared by training, evaluation and the
//! command line.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected. Times are in seconds, angles in radians.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::control::{ControllerAssets, DampingConfig, RoaCalibration};
use crate::dynamics::{PlantError, PlantParams, Variant};
use crate::gp::FitConfig;
use crate::harness::{EpisodeConfig, ResetConfig, SuccessRegion};
use crate::optimizer::{InitialDistribution, OptimizerConfig};
use crate::policy::PolicyInit;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config value: {0}")]
    Invalid(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Curriculum over initial-state distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// `γ_k = clip((k − k_m)/K, 0, 1)`.
    #[default]
    Incremental,
    /// `γ_k = 1` for every trial.
    Standard,
}

impl FromStr for TrainMode {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "incremental" => Ok(TrainMode::Incremental),
            "standard" => Ok(TrainMode::Standard),
            other => Err(ConfigError::Invalid(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Incremental => "incremental",
            TrainMode::Standard => "standard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    /// Plant TOML; the variant's built-in constants when absent.
    pub plant_file: Option<PathBuf>,
    pub seed: u64,
    pub mode: TrainMode,

    pub trials: usize,
    pub k_m: usize,
    pub ramp: usize,
    /// Velocity half-width of the nominal start box.
    pub epsilon: f64,

    pub control_dt: f64,
    pub sim_dt: f64,
    /// Optimization horizon; 3.0 (pendubot) or 2.0 (acrobot) when absent.
    pub horizon: Option<f64>,
    /// Policy execution length per trial; the horizon when absent.
    pub execution_duration: Option<f64>,
    pub exploration_duration: f64,
    pub exploration_segment: f64,

    /// Subset-of-data cap.
    pub max_data: usize,
    pub fit_iterations: usize,
    pub fit_learning_rate: f64,
    pub fit_tolerance: f64,
    pub fit_patience: usize,

    pub n_basis: usize,
    pub velocity_range: f64,

    pub particles: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub exit_window: usize,
    pub exit_lookback: usize,
    pub exit_tolerance: f64,
    pub dropout_rate: f64,
    pub grad_clip: f64,
    pub cost_length: f64,
    pub divergence_speed: f64,
    /// Threads for particle rollouts; 0 uses every core. Results are identical
    /// for any value.
    pub workers: usize,
    /// Start states used to score each trial's policy on the simulator.
    pub eval_starts: usize,

    pub damping_gain: f64,
    pub damping_enter: f64,
    pub damping_exit: f64,
    pub lqr_q: [f64; 4],
    pub lqr_r: f64,
    pub lqr_exit_factor: f64,
    pub roa_samples: usize,
    pub roa_success: f64,
    pub roa_rho_start: f64,

    pub episode_duration: f64,
    pub episodes: usize,
    pub resets: bool,
    pub reset_gap_min: f64,
    pub reset_gap_max: f64,
    pub reset_duration: f64,
    pub pid_kp: f64,
    pub pid_ki: f64,
    pub pid_kd: f64,
    pub success_q_tol: f64,
    pub success_qd_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        let fit = FitConfig::default();
        let reset = ResetConfig::default();
        let region = SuccessRegion::default();
        let damping = DampingConfig::default();
        Self {
            variant: Variant::Pendubot,
            plant_file: None,
            seed: 0,
            mode: TrainMode::Incremental,
            trials: 20,
            k_m: 5,
            ramp: 10,
            epsilon: InitialDistribution::DEFAULT_EPSILON,
            control_dt: 0.02,
            sim_dt: 0.002,
            horizon: None,
            execution_duration: None,
            exploration_duration: 3.0,
            exploration_segment: 0.1,
            max_data: 2000,
            fit_iterations: fit.max_iterations,
            fit_learning_rate: fit.learning_rate,
            fit_tolerance: fit.tolerance,
            fit_patience: fit.patience,
            n_basis: 200,
            velocity_range: 2.0 * std::f64::consts::PI,
            particles: opt.particles,
            learning_rate: opt.learning_rate,
            max_steps: opt.max_steps,
            exit_window: opt.exit_window,
            exit_lookback: opt.exit_lookback,
            exit_tolerance: opt.exit_tolerance,
            dropout_rate: opt.dropout_rate,
            grad_clip: opt.grad_clip,
            cost_length: opt.cost_length,
            divergence_speed: opt.divergence_speed,
            workers: opt.workers,
            eval_starts: 20,
            damping_gain: damping.gain,
            damping_enter: damping.enter,
            damping_exit: damping.exit,
            lqr_q: crate::control::LQR_Q,
            lqr_r: crate::control::LQR_R,
            lqr_exit_factor: 2.0,
            roa_samples: 100,
            roa_success: 0.95,
            roa_rho_start: 20.0,
            episode_duration: 60.0,
            episodes: 10,
            resets: reset.enabled,
            reset_gap_min: reset.gap_min,
            reset_gap_max: reset.gap_max,
            reset_duration: reset.duration,
            pid_kp: reset.kp,
            pid_ki: reset.ki,
            pid_kd: reset.kd,
            success_q_tol: region.q_tol,
            success_qd_tol: region.qd_tol,
        }
    }
}

impl RunConfig {
    /// Defaults for `variant`.
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.trials == 0 {
            return bad("trials must be >= 1");
        }
        if self.ramp == 0 {
            return bad("ramp must be >= 1");
        }
        if !(self.control_dt > 0.0 && self.sim_dt > 0.0) {
            return bad("time steps must be positive");
        }
        let ratio = self.control_dt / self.sim_dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return bad("control_dt must be an integer multiple of sim_dt");
        }
        if self.particles == 0 || self.n_basis == 0 {
            return bad("particles and n_basis must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(self.cost_length > 0.0) {
            return bad("learning_rate and cost_length must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.horizon_steps() == 0 {
            return bad("horizon must cover at least one control step");
        }
        if !(self.exploration_segment > 0.0) {
            return bad("exploration_segment must be positive");
        }
        if !(self.lqr_r > 0.0) || !(self.damping_gain > 0.0) {
            return bad("lqr_r and damping_gain must be positive");
        }
        if self.resets && !(self.reset_gap_min > 0.0 && self.reset_gap_max >= self.reset_gap_min) {
            return bad("reset gaps must satisfy 0 < min <= max");
        }
        Ok(())
    }

    pub fn plant(&self) -> Result<PlantParams<f64>, ConfigError> {
        let plant = match &self.plant_file {
            Some(path) => {
                let p = PlantParams::load(path)?;
                if p.variant != self.variant {
                    return Err(ConfigError::Invalid(format!(
                        "plant file is for {} but the run is for {}",
                        p.variant, self.variant
                    )));
                }
                p
            }
            None => PlantParams::default_for(self.variant),
        };
        Ok(plant)
    }

    pub fn horizon_seconds(&self) -> f64 {
        self.horizon.unwrap_or(match self.variant {
            Variant::Pendubot => 3.0,
            Variant::Acrobot => 2.0,
        })
    }

    pub fn horizon_steps(&self) -> usize {
        (self.horizon_seconds() / self.control_dt).round() as usize
    }

    pub fn execution_steps(&self) -> usize {
        (self.execution_duration.unwrap_or(self.horizon_seconds()) / self.control_dt).round() as usize
    }

    /// Simulator steps per control step.
    pub fn substeps(&self) -> usize {
        (self.control_dt / self.sim_dt).round() as usize
    }

    pub fn x_max(&self) -> [f64; 4] {
        InitialDistribution::nominal(self.epsilon).half_width
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            particles: self.particles,
            horizon: self.horizon_steps(),
            learning_rate: self.learning_rate,
            max_steps: self.max_steps,
            exit_window: self.exit_window,
            exit_lookback: self.exit_lookback,
            exit_tolerance: self.exit_tolerance,
            dropout_rate: self.dropout_rate,
            grad_clip: self.grad_clip,
            cost_length: self.cost_length,
            divergence_speed: self.divergence_speed,
            workers: self.workers,
        }
    }

    pub fn fit(&self) -> FitConfig {
        FitConfig {
            max_iterations: self.fit_iterations,
            learning_rate: self.fit_learning_rate,
            tolerance: self.fit_tolerance,
            patience: self.fit_patience,
        }
    }

    pub fn policy_init(&self, u_max: f64) -> PolicyInit {
        PolicyInit {
            n_basis: self.n_basis,
            u_max,
            velocity_range: self.velocity_range,
        }
    }

    pub fn damping(&self) -> DampingConfig {
        DampingConfig {
            gain: self.damping_gain,
            enter: self.damping_enter,
            exit: self.damping_exit,
        }
    }

    pub fn roa(&self) -> RoaCalibration {
        RoaCalibration {
            samples: self.roa_samples,
            required_success: self.roa_success,
            rho_start: self.roa_rho_start,
            seed: self.seed,
            q_tol: self.success_q_tol,
            qd_tol: self.success_qd_tol,
            ..RoaCalibration::default()
        }
    }

    /// Controller assets for a trained policy: damping fallback on the
    /// pendubot, LQR on the acrobot.
    pub fn assets(&self, policy: Option<crate::policy::PolicyParams<f64>>, lqr: Option<crate::control::LqrStabilizer>) -> ControllerAssets {
        ControllerAssets {
            policy,
            damping: (self.variant == Variant::Pendubot).then(|| self.damping()),
            lqr: if self.variant == Variant::Acrobot { lqr } else { None },
            lqr_exit_factor: self.lqr_exit_factor,
        }
    }

    pub fn episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            duration: self.episode_duration,
            sim_dt: self.sim_dt,
            control_every: self.substeps(),
            region: self.region(),
            ..EpisodeConfig::default()
        }
    }

    pub fn region(&self) -> SuccessRegion {
        SuccessRegion {
            q_tol: self.success_q_tol,
            qd_tol: self.success_qd_tol,
        }
    }

    pub fn reset(&self) -> ResetConfig {
        ResetConfig {
            enabled: self.resets,
            gap_min: self.reset_gap_min,
            gap_max: self.reset_gap_max,
            duration: self.reset_duration,
            kp: self.pid_kp,
            ki: self.pid_ki,
            kd: self.pid_kd,
            grid: self.control_dt,
        }
    }
}
