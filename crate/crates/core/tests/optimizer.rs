use std::f64::consts::PI;

use proptest::prelude::*;

use swingup::dynamics::{JointState, PlantParams, Variant};
use swingup::gp::{fit_hyperparameters, gp_input, FitConfig, GpDataset, GpModel, KernelHyp};
use swingup::grad::Tape;
use swingup::optimizer::{
    batch_cost, batch_cost_and_grad, batch_cost_recorded, draw_batch, optimize_objective, optimize_policy,
    particle_rng, rollout_particles, sample_initial_particles, saturated_cost, write_cost_history,
    InitialDistribution, OptimizerConfig, StopReason,
};
use swingup::policy::{init_policy, PolicyInit, PolicyParams};
use swingup::trainer::{exploration_rollout, Timing};

fn plant() -> PlantParams<f64> {
    PlantParams::default_for(Variant::Pendubot)
}

fn small_policy(seed: u64) -> PolicyParams<f64> {
    init_policy(
        seed,
        &PolicyInit {
            n_basis: 5,
            ..PolicyInit::default()
        },
    )
}

/// Model fitted on a short random-torque rollout of the true plant.
fn fitted_model() -> GpModel<f64> {
    let timing = Timing {
        control_dt: 0.02,
        substeps: 10,
    };
    let log = exploration_rollout(&plant(), 3, 1.0, 0.1, 3.0, JointState::new([0.3, 0.0], [0.0; 2]), timing);
    let mut data = GpDataset::new(0.02);
    for w in log.records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        data.push(gp_input(&a.state, a.u), [b.state.qd[0] - a.state.qd[0], b.state.qd[1] - a.state.qd[1]]);
    }
    let fit = fit_hyperparameters(&data, &plant(), &FitConfig::default()).unwrap();
    GpModel::new(data, fit.hyp, plant()).unwrap()
}

/// Zero-variance limit: the posterior standard deviation is negligible.
fn deterministic_model() -> GpModel<f64> {
    let hyp = KernelHyp {
        lengthscales: [1.0; 5],
        signal_var: 1e-300,
        noise_var: 1e-4,
    };
    GpModel::prior_only(plant(), 0.02, [hyp; 2]).unwrap()
}

fn cfg(particles: usize, horizon: usize) -> OptimizerConfig {
    OptimizerConfig {
        particles,
        horizon,
        ..OptimizerConfig::default()
    }
}

#[test]
fn rollout_gradient_matches_central_differences() {
    let model = fitted_model();
    let c = cfg(2, 5);
    for seed in 0..3 {
        let p = small_policy(seed);
        let draws = draw_batch(&InitialDistribution::nominal(0.5), 2, 5, seed);
        let tape = Tape::new();
        let leaves = p.map(|v| tape.var(v));
        let out = batch_cost_recorded(&model, &leaves, &tape, &draws, &c);
        let g = tape.gradient(out, &leaves.to_flat()).unwrap();
        assert_eq!(out.val(), batch_cost(&model, &p, &draws, &c));

        let (j, g2, _) = batch_cost_and_grad(&model, &p, &draws, &c).unwrap();
        assert!((j - out.val()).abs() < 1e-12);
        let flat = p.to_flat();
        let h = 1e-4;
        for i in 0..flat.len() {
            assert!((g[i] - g2[i]).abs() < 1e-12 * (1.0 + g[i].abs()));
            let mut a = flat.clone();
            let mut b = flat.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (batch_cost(&model, &p.with_flat(&a), &draws, &c) - batch_cost(&model, &p.with_flat(&b), &draws, &c))
                / (2.0 * h);
            if g[i].abs().max(fd.abs()) > 1e-6 {
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs());
                assert!(rel < 1e-4, "seed {seed} param {i}: {} vs {fd}", g[i]);
            }
        }
    }
}

#[test]
fn deterministic_model_collapses_particles() {
    let model = deterministic_model();
    let p = small_policy(1);
    let one = rollout_particles(&model, &p, &InitialDistribution::origin(), &cfg(1, 50), 4);
    let many = rollout_particles(&model, &p, &InitialDistribution::origin(), &cfg(100, 50), 5);
    assert!((one.j_hat - many.j_hat).abs() < 1e-12, "{} vs {}", one.j_hat, many.j_hat);
    for traj in &many.batch.states {
        assert_eq!(traj.last(), one.batch.states[0].last());
    }
}

#[test]
fn particle_streams_are_partition_invariant() {
    let dist = InitialDistribution::nominal(0.1);
    let draws = draw_batch(&dist, 8, 10, 42);
    let starts = sample_initial_particles(&dist, 8, 42);
    assert_eq!(draws.starts, starts);
    let mut rng = particle_rng(42, 5);
    assert_eq!(dist.sample(&mut rng), draws.starts[5]);
    assert_eq!(draw_batch(&dist, 3, 10, 42).noise[..], draws.noise[..3]);
}

#[test]
fn worker_count_does_not_change_results() {
    let model = fitted_model();
    let p = small_policy(8);
    let draws = draw_batch(&InitialDistribution::nominal(0.5), 7, 15, 3);
    let with = |workers| OptimizerConfig {
        workers,
        ..cfg(7, 15)
    };
    let (j, g, div) = batch_cost_and_grad(&model, &p, &draws, &with(1)).unwrap();
    let cost = batch_cost(&model, &p, &draws, &with(1));
    for w in [2, 3, 8] {
        let (jw, gw, dw) = batch_cost_and_grad(&model, &p, &draws, &with(w)).unwrap();
        assert_eq!(jw.to_bits(), j.to_bits());
        assert_eq!(gw, g);
        assert_eq!(dw, div);
        assert_eq!(batch_cost(&model, &p, &draws, &with(w)).to_bits(), cost.to_bits());
    }
}

#[test]
fn diverging_particles_are_pinned_at_unit_cost() {
    let hyp = KernelHyp {
        lengthscales: [1.0; 5],
        signal_var: 1e4,
        noise_var: 1e-4,
    };
    let model = GpModel::prior_only(plant(), 0.02, [hyp; 2]).unwrap();
    let c = cfg(20, 30);
    let r = rollout_particles(&model, &small_policy(2), &InitialDistribution::origin(), &c, 6);
    assert!(r.batch.diverged() > 0);
    assert!(r.j_hat <= (c.horizon + 1) as f64);
    for (states, at) in r.batch.states.iter().zip(&r.batch.diverged_at) {
        if let Some(t) = at {
            assert_eq!(states.len(), t + 2);
        }
    }
}

#[test]
fn rollouts_are_reproducible() {
    let model = fitted_model();
    let p = small_policy(3);
    let dist = InitialDistribution::nominal(0.005);
    let a = rollout_particles(&model, &p, &dist, &cfg(10, 20), 9);
    let b = rollout_particles(&model, &p, &dist, &cfg(10, 20), 9);
    assert_eq!(a, b);
    assert_eq!(a.j_hat.to_bits(), b.j_hat.to_bits());
}

#[test]
fn optimizer_solves_a_quadratic() {
    let start = small_policy(4);
    let target: Vec<f64> = start.to_flat().iter().enumerate().map(|(i, v)| v + 0.3 * ((i % 3) as f64 - 1.0)).collect();
    let c = OptimizerConfig {
        learning_rate: 0.02,
        max_steps: 2000,
        dropout_rate: 0.0,
        ..OptimizerConfig::default()
    };
    let out = optimize_objective(&start, &c, 0, |p, _| {
        let x = p.to_flat();
        // the offset gives the relative exit test a plateau to detect
        let j: f64 = 1.0 + x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let g = x.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        Ok((j, g, 0))
    });
    assert_eq!(out.stop, StopReason::NoImprovement);
    let err = out.params.to_flat().iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 0.05, "distance to optimum {err}");
    assert!(out.history.last().unwrap().j_hat - 1.0 < 1e-2 * (out.history[0].j_hat - 1.0));
}

#[test]
fn non_finite_steps_are_rejected_and_slow_the_rate() {
    let start = small_policy(5);
    let c = OptimizerConfig {
        max_steps: 10,
        dropout_rate: 0.0,
        ..OptimizerConfig::default()
    };
    let mut calls = 0;
    let out = optimize_objective(&start, &c, 0, |p, _| {
        calls += 1;
        let j = if calls <= 3 { f64::NAN } else { 1.0 };
        Ok((j, vec![0.1; p.n_params()], 0))
    });
    assert_eq!(out.rejected_steps, 3);
    assert_eq!(out.history.len(), 7);
    assert!((out.history[0].lr - c.learning_rate / 8.0).abs() < 1e-15);
}

#[test]
fn dropout_gradient_flows_through_the_mask() {
    let start = small_policy(6);
    let c = OptimizerConfig {
        max_steps: 1,
        dropout_rate: 0.5,
        learning_rate: 1e-3,
        ..OptimizerConfig::default()
    };
    let nb = start.n_basis();
    let mut seen = None;
    let out = optimize_objective(&start, &c, 11, |p, _| {
        seen = Some(p.weights.clone());
        let mut g = vec![0.0; p.n_params()];
        g[..nb].fill(1.0);
        Ok((1.0, g, 0))
    });
    let _ = out;
    let masked = seen.unwrap();
    for (m, w) in masked.iter().zip(&start.weights) {
        assert!(*m == 0.0 || (*m - 2.0 * w).abs() < 1e-12);
    }
}

#[test]
fn cost_history_has_fixed_header() {
    let model = deterministic_model();
    let c = OptimizerConfig {
        particles: 4,
        horizon: 10,
        max_steps: 3,
        ..OptimizerConfig::default()
    };
    let out = optimize_policy(&model, &small_policy(7), &InitialDistribution::origin(), &c, 1);
    let mut buf = Vec::new();
    write_cost_history(&out.history, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,J_hat,lr,dropout_rate\n"));
    assert_eq!(text.lines().count(), 4);
}

fn state() -> impl Strategy<Value = JointState<f64>> {
    (-50.0..50.0f64, -50.0..50.0f64, -20.0..20.0f64, -20.0..20.0f64).prop_map(|(a, b, c, d)| JointState::new([a, b], [c, d]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cost_is_bounded_and_zero_only_upright(x in state()) {
        let c = saturated_cost(&x, 3.0);
        prop_assert!((0.0..1.0).contains(&c));
        let up = JointState::new([PI + 2.0 * PI * (x.q[0] / 7.0).round(), 2.0 * PI * (x.q[1] / 7.0).round()], x.qd);
        prop_assert!(saturated_cost(&up, 3.0) < 1e-12);
    }

    #[test]
    fn j_hat_lies_between_zero_and_horizon(seed in 0u64..1000, width in 0.0..1.0f64) {
        let model = deterministic_model();
        let c = cfg(3, 20);
        let dist = InitialDistribution::scaled([PI, PI, 0.5, 0.5], width);
        let r = rollout_particles(&model, &small_policy(seed), &dist, &c, seed);
        prop_assert!(r.j_hat >= 0.0 && r.j_hat <= (c.horizon + 1) as f64);
    }

    #[test]
    fn scaled_box_bounds_samples(gamma in 0.0..=1.0f64, seed in 0u64..1000) {
        let xm = [PI, PI, 0.005, 0.005];
        let dist = InitialDistribution::scaled(xm, gamma);
        for s in sample_initial_particles(&dist, 20, seed) {
            let a = s.to_array();
            for i in 0..4 {
                prop_assert!(a[i].abs() <= xm[i] * gamma);
            }
        }
    }
}
