use std::f64::consts::PI;

use proptest::prelude::*;
use swingup::dynamics::{
    bias_terms, forward_dynamics, mass_matrix, potential_energy, rk4_step, total_energy, wrap_angle, JointState,
    PlantParams, Simulator, Variant,
};

fn plant(variant: Variant) -> PlantParams<f64> {
    PlantParams::default_for(variant)
}

/// Kinetic energy from center-of-mass velocities and inertias about the
/// centers of mass, with the angle measured from the downward vertical.
fn kinetic_oracle(q: [f64; 2], qd: [f64; 2], p: &PlantParams<f64>) -> f64 {
    let (a, b) = (q[0], q[0] + q[1]);
    let (w1, w2) = (qd[0], qd[0] + qd[1]);
    let v1 = [p.r1 * a.cos() * w1, p.r1 * a.sin() * w1];
    let v2 = [
        p.l1 * a.cos() * w1 + p.r2 * b.cos() * w2,
        p.l1 * a.sin() * w1 + p.r2 * b.sin() * w2,
    ];
    let ic1 = p.i1 - p.m1 * p.r1 * p.r1;
    let ic2 = p.i2 - p.m2 * p.r2 * p.r2;
    0.5 * p.m1 * (v1[0] * v1[0] + v1[1] * v1[1])
        + 0.5 * ic1 * w1 * w1
        + 0.5 * p.m2 * (v2[0] * v2[0] + v2[1] * v2[1])
        + 0.5 * ic2 * w2 * w2
}

fn potential_oracle(q: [f64; 2], p: &PlantParams<f64>) -> f64 {
    let y1 = -p.r1 * q[0].cos();
    let y2 = -p.l1 * q[0].cos() - p.r2 * (q[0] + q[1]).cos();
    let rest = -p.m1 * p.r1 - p.m2 * (p.l1 + p.r2);
    p.g * (p.m1 * y1 + p.m2 * y2) - p.g * rest
}

/// Kinetic energy is a quadratic form, so polarization recovers `M` exactly.
fn mass_oracle(q: [f64; 2], p: &PlantParams<f64>) -> [[f64; 2]; 2] {
    let t = |v: [f64; 2]| kinetic_oracle(q, v, p);
    let m11 = 2.0 * t([1.0, 0.0]);
    let m22 = 2.0 * t([0.0, 1.0]);
    let m12 = t([1.0, 1.0]) - 0.5 * m11 - 0.5 * m22;
    [[m11, m12], [m12, m22]]
}

/// `Ṁ q̇ − ∂T/∂q + ∂V/∂q + b ⊙ q̇` by central differences.
fn bias_oracle(q: [f64; 2], qd: [f64; 2], p: &PlantParams<f64>) -> [f64; 2] {
    let h = 1e-6;
    let shift = |k: usize, s: f64| {
        let mut x = q;
        x[k] += s;
        x
    };
    let mut out = [0.0; 2];
    let mut mdot = [[0.0; 2]; 2];
    for k in 0..2 {
        let (mp, mm) = (mass_oracle(shift(k, h), p), mass_oracle(shift(k, -h), p));
        for i in 0..2 {
            for j in 0..2 {
                mdot[i][j] += (mp[i][j] - mm[i][j]) / (2.0 * h) * qd[k];
            }
        }
    }
    for i in 0..2 {
        let dt = (kinetic_oracle(shift(i, h), qd, p) - kinetic_oracle(shift(i, -h), qd, p)) / (2.0 * h);
        let dv = (potential_oracle(shift(i, h), p) - potential_oracle(shift(i, -h), p)) / (2.0 * h);
        out[i] = mdot[i][0] * qd[0] + mdot[i][1] * qd[1] - dt + dv;
    }
    out[0] += p.b1 * qd[0];
    out[1] += p.b2 * qd[1];
    out
}

fn state() -> impl Strategy<Value = JointState<f64>> {
    (-10.0..10.0f64, -10.0..10.0f64, -8.0..8.0f64, -8.0..8.0f64).prop_map(|(a, b, c, d)| JointState::new([a, b], [c, d]))
}

#[test]
fn mass_matrix_matches_lagrangian() {
    for variant in [Variant::Pendubot, Variant::Acrobot] {
        let p = plant(variant);
        for k in 0..50 {
            let q = [0.37 * k as f64 - 9.0, 1.3 - 0.21 * k as f64];
            let m = mass_matrix(q, &p);
            let o = mass_oracle(q, &p);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((m[i][j] - o[i][j]).abs() < 1e-12, "M[{i}][{j}] at {q:?}");
                }
            }
        }
    }
}

#[test]
fn bias_terms_match_lagrangian() {
    let damped = PlantParams {
        b1: 0.05,
        b2: 0.02,
        ..plant(Variant::Pendubot)
    };
    for k in 0..50 {
        let f = k as f64;
        let q = [0.3 * f - 7.0, 2.0 - 0.17 * f];
        let qd = [0.4 * f - 10.0, 6.0 - 0.25 * f];
        let n = bias_terms(q, qd, &damped);
        let o = bias_oracle(q, qd, &damped);
        for i in 0..2 {
            assert!((n[i] - o[i]).abs() < 1e-6 * (1.0 + o[i].abs()), "n[{i}] {} vs {}", n[i], o[i]);
        }
    }
}

#[test]
fn potential_matches_oracle() {
    let p = plant(Variant::Acrobot);
    for k in 0..40 {
        let q = [0.5 * k as f64 - 10.0, 3.0 - 0.3 * k as f64];
        assert!((potential_energy(q, &p) - potential_oracle(q, &p)).abs() < 1e-12);
    }
}

#[test]
fn rk4_error_scales_with_fourth_power() {
    let p = plant(Variant::Pendubot);
    let x0 = JointState::new([1.2, -0.7], [0.5, 1.0]);
    let run = |dt: f64, steps: usize| {
        let mut x = x0;
        for _ in 0..steps {
            x = rk4_step(&x, 0.4, dt, &p);
        }
        x.to_array()
    };
    let reference = run(0.000125, 8000);
    let err = |x: [f64; 4]| x.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let coarse = err(run(0.004, 250));
    let fine = err(run(0.002, 500));
    let ratio = coarse / fine;
    assert!((12.0..20.0).contains(&ratio), "step-halving ratio {ratio}");
}

#[test]
fn energy_drift_over_ten_seconds() {
    for variant in [Variant::Pendubot, Variant::Acrobot] {
        let p = plant(variant);
        let mut sim = Simulator::new(p);
        let mut x = JointState::new([2.0, -1.0], [1.0, 0.0]);
        let e0 = total_energy(&x, &p);
        let mut worst: f64 = 0.0;
        for _ in 0..5000 {
            x = sim.step(&x, 0.0).0;
            worst = worst.max((total_energy(&x, &p) - e0).abs() / e0.abs());
        }
        assert!(worst < 1e-3, "{variant}: relative drift {worst}");
    }
}

#[test]
fn simulator_saturates_and_counts() {
    let p = plant(Variant::Pendubot);
    let mut sim = Simulator::new(p);
    let x = JointState::zero();
    let (_, applied) = sim.step(&x, 10.0);
    assert_eq!(applied, 3.0);
    let (_, applied) = sim.step(&x, -1.0);
    assert_eq!(applied, -1.0);
    assert_eq!(sim.clamp_events(), 1);
}

#[test]
fn forward_dynamics_is_generic_over_the_scalar() {
    let p = plant(Variant::Acrobot);
    let x = JointState::new([0.3, -0.2], [0.1, 0.4]);
    let a64 = forward_dynamics(&x, 1.0, &p);
    let a32 = forward_dynamics(&x.cast::<f32>(), 1.0f32, &p.cast::<f32>());
    for i in 0..2 {
        assert!((a64[i] - a32[i] as f64).abs() < 1e-4 * (1.0 + a64[i].abs()));
    }
}

#[test]
fn goal_is_an_equilibrium() {
    for variant in [Variant::Pendubot, Variant::Acrobot] {
        let qdd = forward_dynamics(&JointState::new([PI, 0.0], [0.0; 2]), 0.0, &plant(variant));
        assert!(qdd[0].abs() < 1e-12 && qdd[1].abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn mass_matrix_is_spd(x in state()) {
        let p = plant(Variant::Pendubot);
        let m = mass_matrix(x.q, &p);
        prop_assert!((m[0][1] - m[1][0]).abs() == 0.0);
        prop_assert!(m[0][0] > 0.0);
        prop_assert!(m[0][0] * m[1][1] - m[0][1] * m[1][0] > 0.0);
    }

    #[test]
    fn forward_dynamics_inverts_equations_of_motion(x in state(), u in -3.0..3.0f64, acro in any::<bool>()) {
        let p = plant(if acro { Variant::Acrobot } else { Variant::Pendubot });
        let qdd = forward_dynamics(&x, u, &p);
        let m = mass_matrix(x.q, &p);
        let n = bias_terms(x.q, x.qd, &p);
        let b = p.actuation();
        for i in 0..2 {
            let lhs = m[i][0] * qdd[0] + m[i][1] * qdd[1] + n[i];
            prop_assert!((lhs - b[i] * u).abs() < 1e-9 * (1.0 + n[i].abs()));
        }
    }

    #[test]
    fn dynamics_are_periodic_in_the_angles(x in state(), u in -3.0..3.0f64, k1 in -3i32..3, k2 in -3i32..3) {
        let p = plant(Variant::Pendubot);
        let shifted = JointState::new(
            [x.q[0] + 2.0 * PI * k1 as f64, x.q[1] + 2.0 * PI * k2 as f64],
            x.qd,
        );
        let a = forward_dynamics(&x, u, &p);
        let b = forward_dynamics(&shifted, u, &p);
        for i in 0..2 {
            prop_assert!((a[i] - b[i]).abs() < 1e-8 * (1.0 + a[i].abs()));
        }
    }

    #[test]
    fn wrap_angle_lands_in_half_open_interval(q in -100.0..100.0f64) {
        let w = wrap_angle(q);
        prop_assert!(w > -PI && w <= PI);
        let turns = (q - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn torque_beyond_limit_is_saturated(x in state(), u in 3.0..50.0f64) {
        let p = plant(Variant::Acrobot);
        prop_assert_eq!(forward_dynamics(&x, u, &p), forward_dynamics(&x, 3.0, &p));
        prop_assert_eq!(forward_dynamics(&x, -u, &p), forward_dynamics(&x, -3.0, &p));
    }
}
