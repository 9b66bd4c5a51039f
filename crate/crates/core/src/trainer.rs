//! The outer trial loop: model learning, policy update and policy execution,
//! with a curriculum over initial-state distributions.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainMode};
use crate::dynamics::{JointState, PlantParams, Simulator};
use crate::gp::{fit_hyperparameters, gp_input, GpDataset, GpError, GpModel, HyperFile, KernelHyp};
use crate::harness::{EpisodeLog, EpisodeMeta, LogMode, SuccessRegion};
use crate::io::write_atomic;
use crate::optimizer::{optimize_policy, saturated_cost, write_cost_history, InitialDistribution, StepRecord, StopReason};
use crate::policy::{init_policy, PolicyParams};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("log is not uniformly sampled at {expected} s (record {index} at t = {t})")]
    NonUniform { expected: f64, index: usize, t: f64 },
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `clip((k − k_m)/K, 0, 1)`.
pub fn gamma_schedule(k: usize, k_m: usize, ramp: usize) -> f64 {
    assert!(ramp >= 1, "ramp length must be >= 1");
    ((k as f64 - k_m as f64) / ramp as f64).clamp(0.0, 1.0)
}

/// `U(−x_M γ, x_M γ)`.
pub fn surrogate_distribution(gamma: f64, x_max: [f64; 4]) -> InitialDistribution {
    InitialDistribution::scaled(x_max, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub k_m: usize,
    pub ramp: usize,
    pub trials: usize,
    pub x_max: [f64; 4],
    pub mode: TrainMode,
}

impl CurriculumConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            k_m: cfg.k_m,
            ramp: cfg.ramp,
            trials: cfg.trials,
            x_max: cfg.x_max(),
            mode: cfg.mode,
        }
    }

    pub fn gamma(&self, k: usize) -> f64 {
        match self.mode {
            TrainMode::Incremental => gamma_schedule(k, self.k_m, self.ramp),
            TrainMode::Standard => 1.0,
        }
    }

    pub fn distribution(&self, k: usize) -> InitialDistribution {
        surrogate_distribution(self.gamma(k), self.x_max)
    }
}

/// Independent sub-seed for one pipeline stage.
pub fn derive_seed(seed: u64, stage: u64, index: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0xA076_1D64_78BD_642F) ^ index.wrapping_mul(0xE703_7ED1_A0B4_28DB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STAGE_EXPLORE: u64 = 1;
const STAGE_OPTIMIZE: u64 = 2;
const STAGE_EXECUTE: u64 = 3;
const STAGE_SCORE: u64 = 4;

/// Timing of a simulated run at the control rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub control_dt: f64,
    pub substeps: usize,
}

impl Timing {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            control_dt: cfg.control_dt,
            substeps: cfg.substeps(),
        }
    }

    pub fn sim_dt(&self) -> f64 {
        self.control_dt / self.substeps as f64
    }
}

/// Piecewise-constant random torque, one value per `segment` seconds drawn
/// from `U(−amplitude, amplitude)`, logged at the control rate. The final
/// record carries zero torque.
pub fn exploration_rollout(
    plant: &PlantParams<f64>,
    seed: u64,
    duration: f64,
    segment: f64,
    amplitude: f64,
    start: JointState<f64>,
    timing: Timing,
) -> EpisodeLog {
    assert!(duration > 0.0 && segment > 0.0, "durations must be positive");
    let steps = (duration / timing.control_dt).round() as usize;
    let hold = ((segment / timing.control_dt).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sim = Simulator::with_dt(*plant, timing.sim_dt());
    let mut log = EpisodeLog::new(
        timing.control_dt,
        EpisodeMeta {
            seed,
            variant: plant.variant,
            controller: "exploration".into(),
        },
    );
    let mut x = start;
    let mut u = 0.0;
    for i in 0..steps {
        if i % hold == 0 {
            u = if amplitude > 0.0 {
                rng.random_range(-amplitude..=amplitude)
            } else {
                0.0
            };
        }
        log.push(x, u, LogMode::Open);
        for _ in 0..timing.substeps {
            x = sim.step(&x, u).0;
        }
    }
    log.push(x, 0.0, LogMode::Open);
    log
}

/// Runs `policy` on the simulator with a zero-order hold at the control rate.
/// Stops early if the state leaves `speed_limit`.
pub fn execute_policy(
    plant: &PlantParams<f64>,
    policy: &PolicyParams<f64>,
    start: JointState<f64>,
    steps: usize,
    timing: Timing,
    seed: u64,
    speed_limit: f64,
) -> EpisodeLog {
    let mut sim = Simulator::with_dt(*plant, timing.sim_dt());
    let mut log = EpisodeLog::new(
        timing.control_dt,
        EpisodeMeta {
            seed,
            variant: plant.variant,
            controller: "policy".into(),
        },
    );
    let mut x = start;
    for _ in 0..steps {
        let u = plant.clamp_torque(policy.eval(&x));
        log.push(x, u, LogMode::Policy);
        for _ in 0..timing.substeps {
            x = sim.step(&x, u).0;
        }
        if !x.is_finite() || x.max_speed() > speed_limit {
            log.diverged = true;
            break;
        }
    }
    if x.is_finite() {
        log.push(x, plant.clamp_torque(policy.eval(&x)), LogMode::Policy);
    }
    log
}

/// One `(x̃_t, q̇_{t+1} − q̇_t)` row per consecutive pair of records.
pub fn collect_transitions(log: &EpisodeLog, ts: f64) -> Result<GpDataset<f64>, TrainError> {
    let tol = 1e-9 * ts.max(1.0);
    if (log.dt - ts).abs() > tol {
        return Err(TrainError::NonUniform {
            expected: ts,
            index: 0,
            t: log.dt,
        });
    }
    let mut data = GpDataset::new(ts);
    for (i, w) in log.records.windows(2).enumerate() {
        let step = w[1].t - w[0].t;
        if (step - ts).abs() > 1e-6 * ts {
            return Err(TrainError::NonUniform {
                expected: ts,
                index: i + 1,
                t: w[1].t,
            });
        }
        let (a, b) = (&w[0].state, &w[1].state);
        data.push(gp_input(a, w[0].u), [b.qd[0] - a.qd[0], b.qd[1] - a.qd[1]]);
    }
    Ok(data)
}

/// Cumulative saturated cost `Σ_{t=0..T} c(x_t)` of a control-rate log,
/// padded with the maximum cost if the log was cut short.
pub fn trajectory_cost(log: &EpisodeLog, steps: usize, cost_length: f64) -> f64 {
    let observed: f64 = log.records.iter().take(steps + 1).map(|r| saturated_cost(&r.state, cost_length)).sum();
    observed + (steps + 1).saturating_sub(log.records.len()) as f64
}

/// Time of the first record inside `region`, if any.
pub fn first_success(log: &EpisodeLog, region: &SuccessRegion) -> Option<f64> {
    log.records.iter().find(|r| region.contains(&r.state)).map(|r| r.t)
}

/// Policy quality on the true simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    /// Mean cumulative cost over start states from the nominal distribution.
    pub nominal_cost: f64,
    /// Cumulative cost from the hanging rest state.
    pub rest_cost: f64,
    /// First entry into the success region from rest, within the horizon.
    pub swing_up_time: Option<f64>,
}

/// Scores `policy` on the simulator over the optimization horizon.
pub fn score_policy(cfg: &RunConfig, plant: &PlantParams<f64>, policy: &PolicyParams<f64>, seed: u64) -> PolicyScore {
    let timing = Timing::from_run(cfg);
    let steps = cfg.horizon_steps();
    let nominal = InitialDistribution::nominal(cfg.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.eval_starts.max(1);
    let mut total = 0.0;
    for _ in 0..n {
        let log = execute_policy(plant, policy, nominal.sample(&mut rng), steps, timing, seed, cfg.divergence_speed);
        total += trajectory_cost(&log, steps, cfg.cost_length);
    }
    let rest = execute_policy(plant, policy, JointState::zero(), steps, timing, seed, cfg.divergence_speed);
    PolicyScore {
        nominal_cost: total / n as f64,
        rest_cost: trajectory_cost(&rest, steps, cfg.cost_length),
        swing_up_time: first_success(&rest, &cfg.region()),
    }
}

/// Everything produced by one trial.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub k: usize,
    pub gamma: f64,
    pub episode: EpisodeLog,
    /// Rows collected so far, before subsetting.
    pub dataset_size: usize,
    pub policy: PolicyParams<f64>,
    pub history: Vec<StepRecord>,
    pub stop: Option<StopReason>,
    pub rejected_steps: usize,
    pub hyper: Option<HyperFile>,
    pub score: PolicyScore,
    /// Set when a stage failed; training continues with the previous policy.
    pub error: Option<String>,
}

/// Training state carried between trials.
pub struct Trainer {
    pub cfg: RunConfig,
    pub plant: PlantParams<f64>,
    pub curriculum: CurriculumConfig,
    pub data: GpDataset<f64>,
    pub policy: PolicyParams<f64>,
    pub model: Option<GpModel<f64>>,
    pub exploration: EpisodeLog,
    pub records: Vec<TrialRecord>,
}

impl Trainer {
    /// Initial policy and the exploration data set.
    pub fn new(cfg: RunConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let plant = cfg.plant()?;
        let curriculum = CurriculumConfig::from_run(&cfg);
        let timing = Timing::from_run(&cfg);
        let start = curriculum
            .distribution(0)
            .sample(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STAGE_EXPLORE, 1)));
        let exploration = exploration_rollout(
            &plant,
            derive_seed(cfg.seed, STAGE_EXPLORE, 0),
            cfg.exploration_duration,
            cfg.exploration_segment,
            plant.torque_limit,
            start,
            timing,
        );
        let data = collect_transitions(&exploration, cfg.control_dt)?;
        let policy = init_policy(cfg.seed, &cfg.policy_init(plant.torque_limit));
        Ok(Self {
            cfg,
            plant,
            curriculum,
            data,
            policy,
            model: None,
            exploration,
            records: Vec::new(),
        })
    }

    fn learn_model(&mut self) -> Result<(), GpError> {
        let subset = self.data.subset_of_data(self.cfg.max_data);
        let fit = fit_hyperparameters(&subset, &self.plant, &self.cfg.fit())?;
        if !fit.converged.iter().all(|c| *c) {
            log::debug!("hyperparameter fit hit the iteration cap");
        }
        self.model = Some(GpModel::new(subset, fit.hyp, self.plant)?);
        Ok(())
    }

    /// Model learning, policy update and policy execution for trial `k`.
    pub fn run_trial(&mut self, k: usize) -> &TrialRecord {
        let gamma = self.curriculum.gamma(k);
        let dist = self.curriculum.distribution(k);
        let mut error = None;
        if let Err(e) = self.learn_model() {
            log::warn!("trial {k}: model learning failed: {e}");
            error = Some(format!("model learning: {e}"));
            if self.model.is_none() {
                let hyp = [KernelHyp::unit(); 2];
                self.model = GpModel::prior_only(self.plant, self.cfg.control_dt, hyp).ok();
            }
        }
        let mut history = Vec::new();
        let mut stop = None;
        let mut rejected = 0;
        if let Some(model) = &self.model {
            let out = optimize_policy(model, &self.policy, &dist, &self.cfg.optimizer(), derive_seed(self.cfg.seed, STAGE_OPTIMIZE, k as u64));
            self.policy = out.params;
            history = out.history;
            stop = Some(out.stop);
            rejected = out.rejected_steps;
            log::info!(
                "trial {k}: gamma {gamma:.2}, {} steps, J_hat {:.3} -> {:.3}",
                history.len(),
                history.first().map_or(f64::NAN, |r| r.j_hat),
                history.last().map_or(f64::NAN, |r| r.j_hat)
            );
        }
        let exec_seed = derive_seed(self.cfg.seed, STAGE_EXECUTE, k as u64);
        let start = dist.sample(&mut ChaCha8Rng::seed_from_u64(exec_seed));
        let timing = Timing::from_run(&self.cfg);
        let episode = execute_policy(&self.plant, &self.policy, start, self.cfg.execution_steps(), timing, exec_seed, self.cfg.divergence_speed);
        match collect_transitions(&episode, self.cfg.control_dt) {
            Ok(rows) => self.data.extend(&rows),
            Err(e) => error = Some(format!("data collection: {e}")),
        }
        let score = score_policy(&self.cfg, &self.plant, &self.policy, derive_seed(self.cfg.seed, STAGE_SCORE, k as u64));
        self.records.push(TrialRecord {
            k,
            gamma,
            episode,
            dataset_size: self.data.len(),
            policy: self.policy.clone(),
            history,
            stop,
            rejected_steps: rejected,
            hyper: self.model.as_ref().map(|m| m.hyper_file()),
            score,
            error,
        });
        self.records.last().expect("just pushed")
    }
}

/// Final artifacts of a training run.
pub struct TrainOutcome {
    pub policy: PolicyParams<f64>,
    pub model: Option<GpModel<f64>>,
    pub exploration: EpisodeLog,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTrial {
    pub k: usize,
    pub gamma: f64,
    pub dataset_size: usize,
    pub optimizer_steps: usize,
    pub final_j_hat: Option<f64>,
    pub score: PolicyScore,
    pub error: Option<String>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub variant: crate::dynamics::Variant,
    pub mode: TrainMode,
    pub seed: u64,
    pub files: Vec<String>,
    pub trials: Vec<ManifestTrial>,
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<String, TrainError> {
    let path = dir.join(name);
    write_atomic(&path, bytes).map_err(io_err(&path))?;
    Ok(name.to_owned())
}

fn write_trial(dir: &Path, rec: &TrialRecord, data: Option<&GpDataset<f64>>) -> Result<Vec<String>, TrainError> {
    let sub = format!("trial_{}", rec.k);
    let tdir = dir.join(&sub);
    std::fs::create_dir_all(&tdir).map_err(io_err(&tdir))?;
    let mut files = Vec::new();
    files.push(write(&tdir, "episode.csv", rec.episode.to_csv_string().as_bytes())?);
    let mut hist = Vec::new();
    write_cost_history(&rec.history, &mut hist).map_err(|e| TrainError::Io {
        path: tdir.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    files.push(write(&tdir, "cost_history.csv", &hist)?);
    files.push(write(&tdir, "policy.json", rec.policy.to_json().as_bytes())?);
    if let Some(h) = &rec.hyper {
        files.push(write(&tdir, "model.json", h.to_json().as_bytes())?);
    }
    if let Some(d) = data {
        let mut buf = Vec::new();
        d.write_csv(&mut buf)?;
        files.push(write(&tdir, "data.csv", &buf)?);
    }
    Ok(files.into_iter().map(|f| format!("{sub}/{f}")).collect())
}

/// Runs the full curriculum. When `out_dir` is given, artifacts are written
/// there as each trial finishes.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let dir: Option<PathBuf> = out_dir.map(Path::to_path_buf);
    let mut manifest = Manifest {
        schema_version: 1,
        variant: cfg.variant,
        mode: cfg.mode,
        seed: cfg.seed,
        files: Vec::new(),
        trials: Vec::new(),
    };
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
        manifest.files.push(write(d, "config.snapshot", cfg.to_toml_string().as_bytes())?);
        manifest.files.push(write(d, "exploration.csv", trainer.exploration.to_csv_string().as_bytes())?);
    }
    for k in 0..cfg.trials {
        trainer.run_trial(k);
        let rec = trainer.records.last().expect("trial recorded");
        let files = match &dir {
            Some(d) => {
                let data = trainer.model.as_ref().map(|m| m.dataset());
                write_trial(d, rec, data)?
            }
            None => Vec::new(),
        };
        manifest.trials.push(ManifestTrial {
            k,
            gamma: rec.gamma,
            dataset_size: rec.dataset_size,
            optimizer_steps: rec.history.len(),
            final_j_hat: rec.history.last().map(|r| r.j_hat),
            score: rec.score,
            error: rec.error.clone(),
            files,
        });
        if let Some(d) = &dir {
            write(d, "manifest.json", serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes())?;
        }
    }
    if let Some(d) = &dir {
        manifest.files.push(write(d, "policy.json", trainer.policy.to_json().as_bytes())?);
        write(d, "manifest.json", serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes())?;
    }
    Ok(TrainOutcome {
        policy: trainer.policy,
        model: trainer.model,
        exploration: trainer.exploration,
        trials: trainer.records,
    })
}
