//! Monte-Carlo policy evaluation and gradient-based policy improvement.
//!
//! The expected cumulative cost is estimated by propagating `N` particles
//! through the GP model under the current policy,
//! `Ĵ = Σ_{t=0..T} (1/N) Σ_n c(x_t⁽ⁿ⁾)`, with every stochastic step written as
//! a deterministic function of pre-drawn standard-normal noise so that `Ĵ`
//! can be differentiated with respect to the policy parameters.

use std::io::Write;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, JointState};
use crate::gp::{GpModel, ModelScalar};
use crate::grad::{GradError, Tape, Var};
use crate::optim::Adam;
use crate::policy::{apply_dropout, feature_map, PolicyParams, RecordedPolicy, FEATURES};
use crate::scalar::{lit, Real};

/// Saturated distance to the upright goal `q_G = [π, 0]`:
/// `1 − exp(−‖|q| − q_G‖²_Σc)`, `Σc = diag(1/ℓc, 1/ℓc)`, on wrapped angles.
pub fn saturated_cost<T: Real>(state: &JointState<T>, lc: T) -> T {
    let e1 = wrap_angle(state.q[0]).abs() - T::PI();
    let e2 = wrap_angle(state.q[1]).abs();
    T::one() - (-(e1 * e1 + e2 * e2) / lc).exp()
}

/// Uniform box `U(−w, w)` over `[q1, q2, q̇1, q̇2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialDistribution {
    pub half_width: [f64; 4],
}

impl InitialDistribution {
    /// Velocity half-width used for the nominal box.
    pub const DEFAULT_EPSILON: f64 = 0.005;

    /// `x_M = [π, π, ε, ε]`.
    pub fn nominal(epsilon: f64) -> Self {
        let pi = std::f64::consts::PI;
        Self {
            half_width: [pi, pi, epsilon, epsilon],
        }
    }

    /// `x_M · γ`.
    pub fn scaled(x_max: [f64; 4], gamma: f64) -> Self {
        assert!((0.0..=1.0).contains(&gamma), "gamma must lie in [0, 1]");
        Self {
            half_width: x_max.map(|w| w * gamma),
        }
    }

    /// Point mass at the hanging rest state.
    pub fn origin() -> Self {
        Self { half_width: [0.0; 4] }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> JointState<f64> {
        let x: [f64; 4] = std::array::from_fn(|i| {
            let u: f64 = rng.random();
            (2.0 * u - 1.0) * self.half_width[i]
        });
        JointState::from_array(x)
    }
}

/// Random stream owned by particle `index` under `seed`. Each particle draws
/// its start state and then its per-step noise from its own stream, so any
/// partition of the batch reproduces the same values.
pub fn particle_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `n` i.i.d. start states from `dist`, reproducible by `seed`.
pub fn sample_initial_particles(dist: &InitialDistribution, n: usize, seed: u64) -> Vec<JointState<f64>> {
    assert!(n >= 1, "need at least one particle");
    (0..n).map(|i| dist.sample(&mut particle_rng(seed, i))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub particles: usize,
    /// Rollout length in model steps.
    pub horizon: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Moving-average window of `Ĵ` used by the exit test.
    pub exit_window: usize,
    /// Distance in steps between the two moving averages compared.
    pub exit_lookback: usize,
    /// Minimum relative improvement required over `exit_lookback` steps.
    pub exit_tolerance: f64,
    pub dropout_rate: f64,
    /// Gradient norm ceiling.
    pub grad_clip: f64,
    /// Cost length scale `ℓc`.
    pub cost_length: f64,
    /// Particles whose speed exceeds this are frozen at maximum cost.
    pub divergence_speed: f64,
    /// Threads sharing a particle batch; 0 uses every available core.
    /// Results do not depend on this value.
    pub workers: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            particles: 400,
            horizon: 150,
            learning_rate: 0.01,
            max_steps: 1000,
            exit_window: 50,
            exit_lookback: 100,
            exit_tolerance: 0.005,
            dropout_rate: 0.25,
            grad_clip: 10.0,
            cost_length: 3.0,
            divergence_speed: 50.0,
            workers: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) {
        assert!(self.particles >= 1, "particles must be >= 1");
        assert!(self.horizon >= 1, "horizon must be >= 1");
        assert!(self.learning_rate > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&self.dropout_rate), "dropout rate in [0, 1)");
        assert!(self.cost_length > 0.0, "cost length must be positive");
    }
}

/// Simulated particle trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleBatch {
    /// `N` trajectories of `T + 1` states (diverged particles stop early).
    pub states: Vec<Vec<JointState<f64>>>,
    /// `N × T` standard-normal draws.
    pub noise: Vec<Vec<[f64; 2]>>,
    pub torques: Vec<Vec<f64>>,
    /// Step at which each particle diverged, if it did.
    pub diverged_at: Vec<Option<usize>>,
}

impl ParticleBatch {
    pub fn diverged(&self) -> usize {
        self.diverged_at.iter().filter(|d| d.is_some()).count()
    }
}

/// Scalars that can drive a particle rollout: plain `f64` evaluates,
/// [`Var`] records.
pub trait RolloutScalar: ModelScalar<Base = f64> {
    type Policy;
    fn policy_output(policy: &Self::Policy, phi: &[Self; FEATURES]) -> Self;
}

impl RolloutScalar for f64 {
    type Policy = PolicyParams<f64>;
    fn policy_output(policy: &PolicyParams<f64>, phi: &[f64; FEATURES]) -> f64 {
        policy.eval_features(phi)
    }
}

/// Policy prepared for recording on a particular tape.
pub struct TapePolicy<'t> {
    pub tape: &'t Tape,
    pub recorded: Rc<RecordedPolicy>,
}

impl<'t> RolloutScalar for Var<'t> {
    type Policy = TapePolicy<'t>;
    fn policy_output(policy: &TapePolicy<'t>, phi: &[Self; FEATURES]) -> Self {
        policy.recorded.eval(policy.tape, phi)
    }
}

/// Cumulative cost of one particle, `Σ_{t=0..T} c(x_t)`.
fn particle_cost<S: RolloutScalar>(
    model: &GpModel<f64>,
    policy: &S::Policy,
    start: &JointState<f64>,
    noise: &[[f64; 2]],
    cfg: &OptimizerConfig,
    mut trace: Option<(&mut Vec<JointState<f64>>, &mut Vec<f64>)>,
) -> (S, Option<usize>) {
    let lc: S = lit(cfg.cost_length);
    let mut x: JointState<S> = start.cast();
    let mut total = saturated_cost(&x, lc);
    if let Some((states, _)) = trace.as_mut() {
        states.push(*start);
    }
    for (t, eps) in noise.iter().enumerate() {
        let u = S::policy_output(policy, &feature_map(&x));
        let next = model.sample_next_state(&x, u, *eps);
        if let Some((states, torques)) = trace.as_mut() {
            torques.push(u.value());
            states.push(next.cast());
        }
        if !next.is_finite() || next.max_speed().value() > cfg.divergence_speed {
            // pinned at the maximum per-step cost for the rest of the horizon
            total = total + lit((noise.len() - t) as f64);
            return (total, Some(t));
        }
        total = total + saturated_cost(&next, lc);
        x = next;
    }
    (total, None)
}

/// Start states and noise for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDraws {
    pub starts: Vec<JointState<f64>>,
    pub noise: Vec<Vec<[f64; 2]>>,
}

/// Draws per-particle start states and `horizon` noise pairs from each
/// particle's own stream.
pub fn draw_batch(dist: &InitialDistribution, particles: usize, horizon: usize, seed: u64) -> BatchDraws {
    let mut starts = Vec::with_capacity(particles);
    let mut noise = Vec::with_capacity(particles);
    for i in 0..particles {
        let mut rng = particle_rng(seed, i);
        starts.push(dist.sample(&mut rng));
        noise.push(
            (0..horizon)
                .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
                .collect(),
        );
    }
    BatchDraws { starts, noise }
}

/// Outcome of [`rollout_particles`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub batch: ParticleBatch,
    pub j_hat: f64,
}

/// Simulates the particle batch under `params` and returns `Ĵ`.
pub fn rollout_particles(
    model: &GpModel<f64>,
    params: &PolicyParams<f64>,
    dist: &InitialDistribution,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Rollout {
    cfg.validate();
    let draws = draw_batch(dist, cfg.particles, cfg.horizon, seed);
    let mut batch = ParticleBatch {
        states: Vec::with_capacity(cfg.particles),
        noise: draws.noise.clone(),
        torques: Vec::with_capacity(cfg.particles),
        diverged_at: Vec::with_capacity(cfg.particles),
    };
    let mut sum = 0.0;
    for (start, noise) in draws.starts.iter().zip(&draws.noise) {
        let mut states = Vec::with_capacity(cfg.horizon + 1);
        let mut torques = Vec::with_capacity(cfg.horizon);
        let (c, div) = particle_cost::<f64>(model, params, start, noise, cfg, Some((&mut states, &mut torques)));
        sum += c;
        batch.states.push(states);
        batch.torques.push(torques);
        batch.diverged_at.push(div);
    }
    Rollout {
        batch,
        j_hat: sum / cfg.particles as f64,
    }
}

/// `Ĵ` for fixed draws (no trajectory storage).
pub fn batch_cost(model: &GpModel<f64>, params: &PolicyParams<f64>, draws: &BatchDraws, cfg: &OptimizerConfig) -> f64 {
    let costs = map_particles(draws, cfg.workers, |s, n| particle_cost::<f64>(model, params, s, n, cfg, None).0);
    costs.iter().sum::<f64>() / draws.starts.len() as f64
}

fn worker_count(requested: usize) -> usize {
    match requested {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
}

/// Applies `f` to every particle, splitting the batch into contiguous chunks
/// across threads. Results come back in particle order.
fn map_particles<R, F>(draws: &BatchDraws, workers: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(&JointState<f64>, &[[f64; 2]]) -> R + Sync,
{
    let n = draws.starts.len();
    let workers = worker_count(workers).min(n);
    if workers <= 1 {
        return draws.starts.iter().zip(&draws.noise).map(|(s, e)| f(s, e)).collect();
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|lo| {
                let hi = (lo + chunk).min(n);
                let f = &f;
                scope.spawn(move || (lo..hi).map(|i| f(&draws.starts[i], &draws.noise[i])).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect()
    })
}

/// `Ĵ` for fixed draws recorded on `tape` as a function of the parameter leaves.
pub fn batch_cost_recorded<'t>(
    model: &GpModel<f64>,
    params: &PolicyParams<Var<'t>>,
    tape: &'t Tape,
    draws: &BatchDraws,
    cfg: &OptimizerConfig,
) -> Var<'t> {
    let policy = TapePolicy {
        tape,
        recorded: RecordedPolicy::new(params),
    };
    let mut sum = Var::constant(0.0);
    for (s, n) in draws.starts.iter().zip(&draws.noise) {
        sum = sum + particle_cost::<Var<'t>>(model, &policy, s, n, cfg, None).0;
    }
    sum / lit(draws.starts.len() as f64)
}

/// `Ĵ` and its gradient for fixed draws. Each particle is recorded on its
/// own short tape and the per-particle gradients are averaged.
pub fn batch_cost_and_grad(
    model: &GpModel<f64>,
    params: &PolicyParams<f64>,
    draws: &BatchDraws,
    cfg: &OptimizerConfig,
) -> Result<(f64, Vec<f64>, usize), GradError> {
    let n = draws.starts.len() as f64;
    let per_particle = map_particles(draws, cfg.workers, |s, noise| {
        let tape = Tape::new();
        let leaves = params.map(|x| tape.var(x));
        let policy = TapePolicy {
            tape: &tape,
            recorded: RecordedPolicy::new(&leaves),
        };
        let (c, div) = particle_cost::<Var<'_>>(model, &policy, s, noise, cfg, None);
        tape.gradient(c, &leaves.to_flat()).map(|g| (c.val(), g, div.is_some()))
    });
    let mut value = 0.0;
    let mut grad = vec![0.0; params.n_params()];
    let mut diverged = 0;
    // reduced in particle order so the sum does not depend on the split
    for r in per_particle {
        let (c, g, div) = r?;
        diverged += usize::from(div);
        value += c;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    for g in grad.iter_mut() {
        *g /= n;
    }
    Ok((value / n, grad, diverged))
}

/// One optimization step as logged to the cost history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "J_hat")]
    pub j_hat: f64,
    pub lr: f64,
    pub dropout_rate: f64,
}

/// Writes the cost history as CSV `step,J_hat,lr,dropout_rate`.
pub fn write_cost_history<W: Write>(history: &[StepRecord], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    for r in history {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    NoImprovement,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    /// Parameters with the lowest moving-average cost seen.
    pub params: PolicyParams<f64>,
    pub history: Vec<StepRecord>,
    pub rejected_steps: usize,
    pub diverged_particles: usize,
    pub stop: StopReason,
}

/// Value, gradient and diverged-particle count of one objective evaluation.
pub type Evaluation = (f64, Vec<f64>, usize);

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64 + 1)
}

/// Gradient-descent driver shared by [`optimize_policy`] and tests that
/// substitute a known objective. `objective` receives the dropout-masked
/// parameters and a per-step seed.
pub fn optimize_objective<F>(
    params: &PolicyParams<f64>,
    cfg: &OptimizerConfig,
    seed: u64,
    mut objective: F,
) -> OptimizeOutcome
where
    F: FnMut(&PolicyParams<f64>, u64) -> Result<Evaluation, GradError>,
{
    let mut current = params.clone();
    let mut flat = current.to_flat();
    let mut adam = Adam::new(flat.len(), cfg.learning_rate);
    let mut history = Vec::new();
    let mut best: Option<(f64, PolicyParams<f64>)> = None;
    let mut rejected = 0;
    let mut diverged = 0;
    let mut stop = StopReason::MaxSteps;
    let nb = params.n_basis();
    let window = cfg.exit_window.max(1);

    for step in 0..cfg.max_steps {
        let s = step_seed(seed, step);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(s ^ 0xD50F_u64);
        let dropped = apply_dropout(&current, cfg.dropout_rate, &mut mask_rng);
        let (j, mut g, div) = match objective(&dropped.params, s) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("policy gradient failed at step {step}: {e}");
                rejected += 1;
                adam.learning_rate *= 0.5;
                continue;
            }
        };
        diverged += div;
        // chain rule through the inverted-dropout mask on the weights
        for (gi, sc) in g.iter_mut().take(nb).zip(&dropped.scale) {
            *gi *= sc;
        }
        if !j.is_finite() || g.iter().any(|x| !x.is_finite()) {
            rejected += 1;
            adam.learning_rate *= 0.5;
            log::debug!("non-finite gradient at step {step}; learning rate now {}", adam.learning_rate);
            continue;
        }
        history.push(StepRecord {
            step,
            j_hat: j,
            lr: adam.learning_rate,
            dropout_rate: cfg.dropout_rate,
        });

        let h = history.len();
        let ma = history[h.saturating_sub(window)..].iter().map(|r| r.j_hat).sum::<f64>()
            / h.min(window) as f64;
        if best.as_ref().map_or(true, |(b, _)| ma < *b) {
            best = Some((ma, current.clone()));
        }
        if h >= window + cfg.exit_lookback {
            let prev = history[h - cfg.exit_lookback - window..h - cfg.exit_lookback]
                .iter()
                .map(|r| r.j_hat)
                .sum::<f64>()
                / window as f64;
            if prev - ma < cfg.exit_tolerance * prev.abs() {
                stop = StopReason::NoImprovement;
                break;
            }
        }

        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            g.iter_mut().for_each(|x| *x *= s);
        }
        adam.step(&mut flat, &g);
        current = current.with_flat(&flat);
    }
    OptimizeOutcome {
        params: best.map_or(current, |(_, p)| p),
        history,
        rejected_steps: rejected,
        diverged_particles: diverged,
        stop,
    }
}

/// Minimizes `Ĵ` over the policy parameters with dropout-masked weights and
/// fresh start states and noise at every step.
pub fn optimize_policy(
    model: &GpModel<f64>,
    params: &PolicyParams<f64>,
    dist: &InitialDistribution,
    cfg: &OptimizerConfig,
    seed: u64,
) -> OptimizeOutcome {
    cfg.validate();
    optimize_objective(params, cfg, seed, |p, s| {
        let draws = draw_batch(dist, cfg.particles, cfg.horizon, s);
        batch_cost_and_grad(model, p, &draws, cfg)
    })
}
