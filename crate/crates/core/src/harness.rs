//! Scored evaluation episodes with random resets, and benchmark tables.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{goal_error, Controller, ControllerMode};
use crate::dynamics::{wrap_angle, JointState, PlantParams, Simulator, Variant};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed episode log: {0}")]
    Format(String),
}

/// What produced the torque of a log record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LogMode {
    /// Open-loop signal such as exploration.
    Open,
    Policy,
    Damping,
    Lqr,
    /// PID reset override.
    Reset,
}

impl LogMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LogMode::Open => "OPEN",
            LogMode::Policy => "POLICY",
            LogMode::Damping => "DAMPING",
            LogMode::Lqr => "LQR",
            LogMode::Reset => "RESET",
        }
    }
}

impl From<ControllerMode> for LogMode {
    fn from(m: ControllerMode) -> Self {
        match m {
            ControllerMode::Policy => LogMode::Policy,
            ControllerMode::Damping => LogMode::Damping,
            ControllerMode::Lqr => LogMode::Lqr,
        }
    }
}

impl fmt::Display for LogMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LogMode {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "OPEN" => LogMode::Open,
            "POLICY" => LogMode::Policy,
            "DAMPING" => LogMode::Damping,
            "LQR" => LogMode::Lqr,
            "RESET" => LogMode::Reset,
            other => return Err(HarnessError::Format(format!("unknown mode {other:?}"))),
        })
    }
}

/// State at `t` and the torque held from `t` to the next record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub state: JointState<f64>,
    pub u: f64,
    pub mode: LogMode,
}

impl LogRecord {
    pub fn reset_active(&self) -> bool {
        self.mode == LogMode::Reset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub variant: Variant,
    pub controller: String,
}

/// Uniformly sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub dt: f64,
    pub meta: EpisodeMeta,
    pub records: Vec<LogRecord>,
    /// True when the episode was cut short by divergence.
    pub diverged: bool,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    t: f64,
    q1: f64,
    q2: f64,
    qd1: f64,
    qd2: f64,
    u: f64,
    mode: String,
}

impl EpisodeLog {
    pub fn new(dt: f64, meta: EpisodeMeta) -> Self {
        assert!(dt > 0.0, "log step must be positive");
        Self {
            dt,
            meta,
            records: Vec::new(),
            diverged: false,
        }
    }

    /// Appends a record at `t = len · dt`.
    pub fn push(&mut self, state: JointState<f64>, u: f64, mode: LogMode) {
        let t = self.records.len() as f64 * self.dt;
        self.records.push(LogRecord { t, state, u, mode });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Covered duration, `len · dt`.
    pub fn elapsed(&self) -> f64 {
        self.records.len() as f64 * self.dt
    }

    /// Writes `t,q1,q2,qd1,qd2,u,mode`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.records {
            wr.serialize(CsvRow {
                t: r.t,
                q1: r.state.q[0],
                q2: r.state.q[1],
                qd1: r.state.qd[0],
                qd2: r.state.qd[1],
                u: r.u,
                mode: r.mode.as_str().to_owned(),
            })?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Reads a CSV log; the step is taken from the first two timestamps.
    pub fn read_csv<R: Read>(r: R, meta: EpisodeMeta) -> Result<Self, HarnessError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["t", "q1", "q2", "qd1", "qd2", "u", "mode"] {
            return Err(HarnessError::Format(format!("unexpected header {header:?}")));
        }
        let mut records = Vec::new();
        for row in rd.deserialize::<CsvRow>() {
            let row = row?;
            records.push(LogRecord {
                t: row.t,
                state: JointState::new([row.q1, row.q2], [row.qd1, row.qd2]),
                u: row.u,
                mode: row.mode.parse()?,
            });
        }
        let dt = match records.as_slice() {
            [a, b, ..] => b.t - a.t,
            _ => 1.0,
        };
        if !(dt > 0.0) {
            return Err(HarnessError::Format("timestamps must increase".into()));
        }
        Ok(Self {
            dt,
            meta,
            records,
            diverged: false,
        })
    }
}

/// Joint-space PID pulse on the actuated joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResetEvent {
    pub time: f64,
    pub target: [f64; 2],
    pub duration: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl ResetEvent {
    pub fn active_at(&self, t: f64) -> bool {
        t >= self.time && t < self.time + self.duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResetConfig {
    /// `false` gives an empty schedule.
    pub enabled: bool,
    pub gap_min: f64,
    pub gap_max: f64,
    pub duration: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Trigger times are rounded to this grid.
    pub grid: f64,
}

impl Default for ResetConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gap_min: 5.0,
            gap_max: 15.0,
            duration: 0.2,
            kp: 10.0,
            ki: 0.0,
            kd: 1.0,
            grid: 0.02,
        }
    }
}

/// Renewal process with uniform gaps; targets uniform in `[−π, π]²`.
/// Events that would not finish inside the episode are dropped.
pub fn make_reset_schedule(seed: u64, episode_length: f64, cfg: &ResetConfig) -> Vec<ResetEvent> {
    if !cfg.enabled {
        return Vec::new();
    }
    assert!(cfg.gap_min > 0.0 && cfg.gap_max >= cfg.gap_min, "invalid reset gaps");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let mut t = 0.0;
    loop {
        let gap = if cfg.gap_max > cfg.gap_min {
            rng.random_range(cfg.gap_min..cfg.gap_max)
        } else {
            cfg.gap_min
        };
        t = ((t + gap) / cfg.grid).round() * cfg.grid;
        if t + cfg.duration > episode_length {
            break;
        }
        let target = [rng.random_range(-PI..=PI), rng.random_range(-PI..=PI)];
        events.push(ResetEvent {
            time: t,
            target,
            duration: cfg.duration,
            kp: cfg.kp,
            ki: cfg.ki,
            kd: cfg.kd,
        });
        t += cfg.duration;
    }
    events
}

/// Box around the upright equilibrium counted as stabilized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRegion {
    pub q_tol: f64,
    pub qd_tol: f64,
}

impl Default for SuccessRegion {
    fn default() -> Self {
        Self { q_tol: 0.1, qd_tol: 0.5 }
    }
}

impl SuccessRegion {
    pub fn contains(&self, state: &JointState<f64>) -> bool {
        let e = goal_error(state);
        e[0].abs() < self.q_tol && e[1].abs() < self.q_tol && e[2].abs() < self.qd_tol && e[3].abs() < self.qd_tol
    }
}

/// Fraction of logged time spent inside `region`.
pub fn performance_score(log: &EpisodeLog, region: &SuccessRegion) -> f64 {
    if log.records.is_empty() {
        return 0.0;
    }
    let inside = log.records.iter().filter(|r| region.contains(&r.state)).count();
    inside as f64 / log.records.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub duration: f64,
    pub sim_dt: f64,
    /// Simulator steps per controller sample.
    pub control_every: usize,
    pub initial_state: [f64; 4],
    pub region: SuccessRegion,
    /// Episodes whose speed exceeds this are truncated.
    pub divergence_speed: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            duration: 60.0,
            sim_dt: 0.002,
            control_every: 10,
            initial_state: [0.0; 4],
            region: SuccessRegion::default(),
            divergence_speed: 200.0,
        }
    }
}

/// Result of one scored episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub log: EpisodeLog,
    pub score: f64,
    pub resets: usize,
}

/// Simulates one episode at the simulator rate with the controller sampled
/// every `control_every` steps. During a reset window the PID torque replaces
/// the controller and the controller is not stepped.
pub fn evaluate_episode(
    controller: &mut dyn Controller,
    plant: &PlantParams<f64>,
    seed: u64,
    schedule: &[ResetEvent],
    cfg: &EpisodeConfig,
) -> EpisodeOutcome {
    let steps = (cfg.duration / cfg.sim_dt).round() as usize;
    let mut sim = Simulator::with_dt(*plant, cfg.sim_dt);
    let mut log = EpisodeLog::new(
        cfg.sim_dt,
        EpisodeMeta {
            seed,
            variant: plant.variant,
            controller: controller.name().to_owned(),
        },
    );
    let joint = plant.variant.actuated_joint();
    let mut x = JointState::from_array(cfg.initial_state);
    let mut held = (0.0, LogMode::Policy);
    let mut integral = 0.0;
    for i in 0..steps {
        let t = i as f64 * cfg.sim_dt;
        let reset = schedule.iter().find(|e| e.active_at(t + 0.25 * cfg.sim_dt));
        let (u, mode) = match reset {
            Some(ev) => {
                let err = wrap_angle(ev.target[joint] - x.q[joint]);
                integral += err * cfg.sim_dt;
                (ev.kp * err + ev.ki * integral - ev.kd * x.qd[joint], LogMode::Reset)
            }
            None => {
                integral = 0.0;
                if i % cfg.control_every == 0 || held.1 == LogMode::Reset {
                    let (u, m) = controller.step(&x);
                    held = (u, m.into());
                }
                held
            }
        };
        if reset.is_some() {
            held = (0.0, LogMode::Reset);
        }
        let (next, applied) = sim.step(&x, u);
        log.push(x, applied, mode);
        if !next.is_finite() || next.max_speed() > cfg.divergence_speed {
            log.diverged = true;
            break;
        }
        x = next;
    }
    let score = performance_score(&log, &cfg.region);
    EpisodeOutcome {
        log,
        score,
        resets: schedule.len(),
    }
}

/// One scored episode in a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub controller: String,
    pub variant: Variant,
    pub seed: u64,
    pub score: f64,
    pub resets: usize,
    pub diverged: bool,
}

/// Aggregate over the episodes of one controller on one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub controller: String,
    pub variant: Variant,
    pub episodes: usize,
    /// Diverged episodes, excluded from the statistics.
    pub failures: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub summary: Vec<ScoreSummary>,
}

/// Published scores `(controller, variant, score)` used as sanity anchors.
/// Not reproducible here: plant constants and competition scoring differ.
pub const REFERENCE_SCORES: [(&str, Variant, f64); 6] = [
    ("MC-PILCO (incremental)", Variant::Pendubot, 0.468),
    ("MC-PILCO (incremental)", Variant::Acrobot, 0.292),
    ("MC-PILCO (standard)", Variant::Pendubot, 0.1),
    ("MC-PILCO (standard)", Variant::Acrobot, 0.21),
    ("TVLQR", Variant::Pendubot, 0.094),
    ("TVLQR", Variant::Acrobot, 0.073),
];

pub struct BenchmarkEntry {
    pub controller: Box<dyn Controller>,
    pub plant: PlantParams<f64>,
}

/// Runs every entry on every seed (same reset schedule per seed).
pub fn run_benchmark(entries: &mut [BenchmarkEntry], seeds: &[u64], episode: &EpisodeConfig, resets: &ResetConfig) -> ScoreTable {
    assert!(!entries.is_empty(), "benchmark needs at least one controller");
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for entry in entries.iter_mut() {
        let mut scores = Vec::new();
        let mut failures = 0;
        for &seed in seeds {
            let schedule = make_reset_schedule(seed, episode.duration, resets);
            entry.controller.reset();
            let out = evaluate_episode(entry.controller.as_mut(), &entry.plant, seed, &schedule, episode);
            if out.log.diverged {
                failures += 1;
            } else {
                scores.push(out.score);
            }
            rows.push(ScoreRow {
                controller: entry.controller.name().to_owned(),
                variant: entry.plant.variant,
                seed,
                score: out.score,
                resets: out.resets,
                diverged: out.log.diverged,
            });
        }
        let n = scores.len();
        let mean = if n > 0 { scores.iter().sum::<f64>() / n as f64 } else { f64::NAN };
        let std = if n > 1 {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        summary.push(ScoreSummary {
            controller: entry.controller.name().to_owned(),
            variant: entry.plant.variant,
            episodes: seeds.len(),
            failures,
            mean,
            std,
        });
    }
    ScoreTable { rows, summary }
}

impl ScoreTable {
    /// Row objects `{controller, variant, seed, score, resets, diverged}`.
    pub fn rows_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows).expect("rows serialize")
    }

    /// Plain-text summary with the published anchors for comparison.
    pub fn format(&self) -> String {
        let mut out = format!(
            "{:<28} {:<9} {:>8} {:>8} {:>7} {:>9}\n",
            "controller", "variant", "mean", "std", "n", "failures"
        );
        for s in &self.summary {
            out += &format!(
                "{:<28} {:<9} {:>8.3} {:>8.3} {:>7} {:>9}\n",
                s.controller, s.variant, s.mean, s.std, s.episodes, s.failures
            );
        }
        out += "\nreference (published, not reproducible at desk scale):\n";
        for (name, variant, score) in REFERENCE_SCORES {
            out += &format!("{name:<28} {variant:<9} {score:>8.3}\n");
        }
        out
    }
}
