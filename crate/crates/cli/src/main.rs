use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use swingup::config::{RunConfig, TrainMode};
use swingup::control::{calibrate_roa, Controller, LqrStabilizer, StackController};
use swingup::dynamics::JointState;
use swingup::harness::{evaluate_episode, make_reset_schedule, run_benchmark, BenchmarkEntry};
use swingup::io::write_atomic;
use swingup::trainer::{exploration_rollout, Timing};
use swingup::{PolicyParams, Variant};

#[derive(Parser)]
#[command(name = "swingup", version, about = "Swing-up control of the double pendulum")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// pendubot or acrobot; overrides the config file.
    #[arg(long)]
    variant: Option<Variant>,
    /// Flat TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one episode with a random open-loop torque or a saved policy.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        lqr: Option<PathBuf>,
        /// Seconds; defaults to the configured episode length.
        #[arg(long)]
        duration: Option<f64>,
        /// Start state `q1,q2,qd1,qd2`.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        start: Option<Vec<f64>>,
    },
    /// Run the full training curriculum.
    Train {
        #[command(flatten)]
        common: Common,
        /// incremental or standard.
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Score a policy over seeded episodes with random resets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        /// Saved LQR stabilizer (acrobot); designed and calibrated when absent.
        #[arg(long)]
        lqr: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Score several controllers on the same seeds and reset schedules.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// `name=policy.json`, repeatable.
        #[arg(long = "entry")]
        entries: Vec<String>,
        #[arg(long)]
        lqr: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Add the zero-torque baseline.
        #[arg(long)]
        zero: bool,
    },
    /// Quick numerical self-checks.
    Check {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::for_variant(common.variant.unwrap_or(Variant::Pendubot)),
    };
    if let Some(v) = common.variant {
        if common.config.is_some() && v != cfg.variant {
            log::warn!("--variant {v} overrides config variant {}", cfg.variant);
        }
        cfg.variant = v;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Loads the stabilizer from `path`, or designs and calibrates a fresh one
/// and saves it next to the other outputs.
fn stabilizer(cfg: &RunConfig, path: Option<&Path>, dir: &Path) -> Result<Option<LqrStabilizer>> {
    if cfg.variant != Variant::Acrobot {
        return Ok(None);
    }
    if let Some(p) = path {
        return Ok(Some(LqrStabilizer::load(p).with_context(|| format!("loading {}", p.display()))?));
    }
    let plant = cfg.plant()?;
    let lqr = LqrStabilizer::design(&plant, cfg.lqr_q, cfg.lqr_r)?;
    let lqr = calibrate_roa(&plant, &lqr, &cfg.roa())?;
    info!("calibrated LQR region rho = {:.4}", lqr.rho);
    lqr.save(&dir.join("lqr.json"))?;
    Ok(Some(lqr))
}

fn load_policy(path: &Path) -> Result<PolicyParams> {
    PolicyParams::load(path).with_context(|| format!("loading {}", path.display()))
}

fn simulate(
    common: Common,
    policy: Option<PathBuf>,
    lqr: Option<PathBuf>,
    duration: Option<f64>,
    start: Option<Vec<f64>>,
) -> Result<()> {
    let cfg = load_config(&common)?;
    let dir = out_dir(&common, "out/simulate")?;
    let plant = cfg.plant()?;
    let duration = duration.unwrap_or(cfg.episode_duration);
    let x0 = match start {
        Some(v) => JointState::from_array([v[0], v[1], v[2], v[3]]),
        None => JointState::zero(),
    };
    let log = match policy {
        Some(p) => {
            let assets = cfg.assets(Some(load_policy(&p)?), stabilizer(&cfg, lqr.as_deref(), &dir)?);
            let mut ctrl = StackController::new("policy", assets, plant);
            let episode = swingup::harness::EpisodeConfig {
                duration,
                initial_state: x0.to_array(),
                ..cfg.episode()
            };
            evaluate_episode(&mut ctrl, &plant, cfg.seed, &[], &episode).log
        }
        None => exploration_rollout(
            &plant,
            cfg.seed,
            duration,
            cfg.exploration_segment,
            plant.torque_limit,
            x0,
            Timing::from_run(&cfg),
        ),
    };
    write(&dir, "episode.csv", log.to_csv_string().as_bytes())?;
    let last = log.records.last().map(|r| r.state.to_array()).unwrap_or_default();
    println!("{} records, diverged = {}, final state {:?}", log.len(), log.diverged, last);
    Ok(())
}

fn train(common: Common, mode: Option<TrainMode>, trials: Option<usize>) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    if let Some(t) = trials {
        cfg.trials = t;
    }
    cfg.validate()?;
    let dir = out_dir(&common, "out/train")?;
    let outcome = swingup::trainer::train(&cfg, Some(&dir))?;
    for t in &outcome.trials {
        println!(
            "trial {:2}  gamma {:.2}  data {:5}  rest cost {:8.2}  nominal cost {:8.2}  swing-up {}",
            t.k,
            t.gamma,
            t.dataset_size,
            t.score.rest_cost,
            t.score.nominal_cost,
            t.score.swing_up_time.map_or("-".to_string(), |s| format!("{s:.2} s")),
        );
        if let Some(e) = &t.error {
            println!("          error: {e}");
        }
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn seeds(cfg: &RunConfig, episodes: Option<usize>) -> Vec<u64> {
    (0..episodes.unwrap_or(cfg.episodes) as u64).map(|i| cfg.seed + i).collect()
}

fn evaluate(common: Common, policy: PathBuf, lqr: Option<PathBuf>, episodes: Option<usize>) -> Result<()> {
    let cfg = load_config(&common)?;
    let dir = out_dir(&common, "out/evaluate")?;
    let plant = cfg.plant()?;
    let assets = cfg.assets(Some(load_policy(&policy)?), stabilizer(&cfg, lqr.as_deref(), &dir)?);
    let mut ctrl = StackController::new("policy", assets, plant);
    let episode = cfg.episode();
    let mut rows = Vec::new();
    for seed in seeds(&cfg, episodes) {
        ctrl.reset();
        let schedule = make_reset_schedule(seed, episode.duration, &cfg.reset());
        let out = evaluate_episode(&mut ctrl, &plant, seed, &schedule, &episode);
        write(&dir, &format!("episode_{seed}.csv"), out.log.to_csv_string().as_bytes())?;
        println!("seed {seed:4}  score {:.4}  resets {}  diverged {}", out.score, out.resets, out.log.diverged);
        rows.push(serde_json::json!({
            "seed": seed,
            "score": out.score,
            "resets": out.resets,
            "diverged": out.log.diverged,
        }));
    }
    let ok: Vec<f64> = rows
        .iter()
        .filter(|r| r["diverged"] == false)
        .filter_map(|r| r["score"].as_f64())
        .collect();
    let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
    println!("mean score {mean:.4} over {} episodes", ok.len());
    write(&dir, "scores.json", serde_json::to_string_pretty(&rows)?.as_bytes())?;
    Ok(())
}

fn benchmark(common: Common, entries: Vec<String>, lqr: Option<PathBuf>, episodes: Option<usize>, zero: bool) -> Result<()> {
    let cfg = load_config(&common)?;
    let dir = out_dir(&common, "out/benchmark")?;
    let plant = cfg.plant()?;
    let mut list = Vec::new();
    if zero || entries.is_empty() {
        list.push(BenchmarkEntry {
            controller: Box::new(StackController::zero(plant)) as Box<dyn Controller>,
            plant,
        });
    }
    let lqr = if entries.is_empty() { None } else { stabilizer(&cfg, lqr.as_deref(), &dir)? };
    for e in &entries {
        let Some((name, path)) = e.split_once('=') else {
            bail!("entry {e:?} is not name=policy.json");
        };
        let assets = cfg.assets(Some(load_policy(Path::new(path))?), lqr.clone());
        list.push(BenchmarkEntry {
            controller: Box::new(StackController::new(name, assets, plant)),
            plant,
        });
    }
    let table = run_benchmark(&mut list, &seeds(&cfg, episodes), &cfg.episode(), &cfg.reset());
    write(&dir, "scores.json", table.rows_json().as_bytes())?;
    let text = table.format();
    write(&dir, "table.txt", text.as_bytes())?;
    println!("{text}");
    Ok(())
}

fn check(common: Common) -> Result<bool> {
    let cfg = load_config(&common)?;
    let plant = cfg.plant()?;
    let results = swingup::checks::run_checks(&plant, cfg.seed);
    let mut all = true;
    for r in &results {
        all &= r.passed;
        println!("{} {:<20} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(all)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let run = match cli.command {
        Command::Simulate {
            common,
            policy,
            lqr,
            duration,
            start,
        } => simulate(common, policy, lqr, duration, start).map(|_| true),
        Command::Train { common, mode, trials } => train(common, mode, trials).map(|_| true),
        Command::Evaluate {
            common,
            policy,
            lqr,
            episodes,
        } => evaluate(common, policy, lqr, episodes).map(|_| true),
        Command::Benchmark {
            common,
            entries,
            lqr,
            episodes,
            zero,
        } => benchmark(common, entries, lqr, episodes, zero).map(|_| true),
        Command::Check { common } => check(common),
    };
    match run {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
