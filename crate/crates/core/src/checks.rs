//! Fast self-checks run by the `check` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::control::{care_residual, linearize_at_goal, LqrStabilizer, LQR_Q};
use crate::dynamics::{forward_dynamics, mass_matrix, rk4_step, total_energy, JointState, PlantParams};
use crate::gp::{gp_input, prior_mean, se_kernel, GpDataset, GpModel, KernelHyp};
use crate::grad::Tape;
use crate::linalg::{lu_solve, Mat};
use crate::optimizer::{batch_cost, batch_cost_recorded, draw_batch, saturated_cost, InitialDistribution, OptimizerConfig};
use crate::policy::{init_policy, PolicyInit};
use crate::trainer::gamma_schedule;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn random_state(rng: &mut ChaCha8Rng, speed: f64) -> JointState<f64> {
    JointState::new(
        [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
        [rng.random_range(-speed..speed), rng.random_range(-speed..speed)],
    )
}

fn check_dynamics(plant: &PlantParams<f64>, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let x = random_state(rng, 5.0);
        let u = rng.random_range(-3.0..3.0);
        let qdd = forward_dynamics(&x, u, plant);
        let m = mass_matrix(x.q, plant);
        let tau = crate::dynamics::bias_terms(x.q, x.qd, plant);
        let act = plant.actuation();
        for i in 0..2 {
            let lhs = m[i][0] * qdd[0] + m[i][1] * qdd[1] + tau[i];
            worst = worst.max((lhs - act[i] * u).abs());
        }
    }
    result("dynamics inverse", worst < 1e-9, format!("max |M qdd + bias - B u| = {worst:.2e}"))
}

fn check_energy(plant: &PlantParams<f64>) -> CheckResult {
    let free = PlantParams { b1: 0.0, b2: 0.0, ..*plant };
    let mut x = JointState::new([1.0, -0.5], [0.0, 0.0]);
    let e0 = total_energy(&x, &free);
    let mut drift: f64 = 0.0;
    for _ in 0..5000 {
        x = rk4_step(&x, 0.0, 0.002, &free);
        drift = drift.max((total_energy(&x, &free) - e0).abs());
    }
    let rel = drift / e0.abs().max(1.0);
    result("energy drift", rel < 1e-4, format!("relative drift over 10 s = {rel:.2e}"))
}

fn check_gp(plant: &PlantParams<f64>, rng: &mut ChaCha8Rng) -> CheckResult {
    let ts = 0.02;
    let mut data = GpDataset::new(ts);
    for _ in 0..40 {
        let x = random_state(rng, 3.0);
        let u = rng.random_range(-3.0..3.0);
        let inp = gp_input(&x, u);
        let m = prior_mean(&inp, plant, ts);
        data.push(inp, [m[0] + 0.01 * rng.random::<f64>(), m[1] - 0.01 * rng.random::<f64>()]);
    }
    let hyp = KernelHyp {
        lengthscales: [1.5, 1.5, 3.0, 3.0, 2.0],
        signal_var: 1e-3,
        noise_var: 1e-6,
    };
    let model = match GpModel::new(data.clone(), [hyp; 2], *plant) {
        Ok(m) => m,
        Err(e) => return result("gp posterior", false, e.to_string()),
    };
    let n = data.len();
    let jitter = model.jitter()[0];
    let k = Mat::from_fn(n, n, |i, j| {
        se_kernel(&data.inputs[i], &data.inputs[j], &hyp) + if i == j { hyp.noise_var + jitter } else { 0.0 }
    });
    let r = data.residuals(plant, 0);
    let alpha = match lu_solve(&k, &r) {
        Ok(a) => a,
        Err(e) => return result("gp posterior", false, e.to_string()),
    };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = gp_input(&random_state(rng, 3.0), rng.random_range(-3.0..3.0));
        let kx: Vec<f64> = data.inputs.iter().map(|d| se_kernel(&x, d, &hyp)).collect();
        let mean: f64 = kx.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let got = model.residual_posterior(&x, false).mean[0];
        worst = worst.max((got - mean).abs() / mean.abs().max(1e-6));
    }
    result("gp posterior", worst < 1e-6, format!("max rel error vs dense solve = {worst:.2e}"))
}

fn check_gradient(plant: &PlantParams<f64>) -> CheckResult {
    let model = match GpModel::prior_only(*plant, 0.02, [KernelHyp::unit(); 2]) {
        Ok(m) => m,
        Err(e) => return result("rollout gradient", false, e.to_string()),
    };
    let policy = init_policy(3, &PolicyInit { n_basis: 4, u_max: plant.torque_limit, ..PolicyInit::default() });
    let cfg = OptimizerConfig {
        particles: 2,
        horizon: 5,
        ..OptimizerConfig::default()
    };
    let draws = draw_batch(&InitialDistribution::nominal(0.05), 2, 5, 11);
    let tape = Tape::new();
    let leaves = policy.map(|x| tape.var(x));
    let out = batch_cost_recorded(&model, &leaves, &tape, &draws, &cfg);
    let analytic = match tape.gradient(out, &leaves.to_flat()) {
        Ok(g) => g,
        Err(e) => return result("rollout gradient", false, e.to_string()),
    };
    let flat = policy.to_flat();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut probe = flat.clone();
        probe[i] = flat[i] + h;
        let plus = batch_cost(&model, &policy.with_flat(&probe), &draws, &cfg);
        probe[i] = flat[i] - h;
        let minus = batch_cost(&model, &policy.with_flat(&probe), &draws, &cfg);
        let n = (plus - minus) / (2.0 * h);
        if a.abs().max(n.abs()) > 1e-6 {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
        }
    }
    result("rollout gradient", worst < 1e-4, format!("max rel error vs central differences = {worst:.2e}"))
}

fn check_cost(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut ok = true;
    for _ in 0..1000 {
        let c = saturated_cost(&random_state(rng, 20.0), 3.0);
        ok &= (0.0..=1.0).contains(&c);
    }
    let goal: f64 = saturated_cost(&JointState::goal(), 3.0);
    ok &= goal.abs() < 1e-12;
    result("cost bounds", ok, format!("cost at goal = {goal:.1e}"))
}

fn check_schedule() -> CheckResult {
    let g: Vec<f64> = [0, 5, 6, 10, 15, 20].iter().map(|&k| gamma_schedule(k, 5, 10)).collect();
    let want = [0.0, 0.0, 0.1, 0.5, 1.0, 1.0];
    let ok = g.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12);
    result("curriculum schedule", ok, format!("{g:?}"))
}

fn check_lqr(plant: &PlantParams<f64>) -> CheckResult {
    match LqrStabilizer::design(plant, LQR_Q, crate::control::LQR_R) {
        Ok(l) => {
            let (a, b) = linearize_at_goal(plant);
            let q = Mat::diag(&LQR_Q);
            let res = care_residual(&a, &b, &q, crate::control::LQR_R, &Mat::from_fn(4, 4, |i, j| l.s[i][j])).max_abs();
            result("riccati residual", res < 1e-8, format!("max |residual| = {res:.2e}"))
        }
        Err(e) => result("riccati residual", false, e.to_string()),
    }
}

/// Runs every check against `plant`; a few seconds in release builds.
pub fn run_checks(plant: &PlantParams<f64>, seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_dynamics(plant, &mut rng),
        check_energy(plant),
        check_gp(plant, &mut rng),
        check_gradient(plant),
        check_cost(&mut rng),
        check_schedule(),
        check_lqr(plant),
    ]
}
