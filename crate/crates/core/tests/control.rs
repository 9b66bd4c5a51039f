use std::f64::consts::PI;

use nalgebra::{Matrix4, Vector4};
use proptest::prelude::*;

use swingup::control::{
    calibrate_roa, controller_step, damping_controller, goal_error, in_roa, linearize_at_goal, lqr_gain,
    roa_success_rate, ControllerAssets, ControllerMode, DampingConfig, LqrStabilizer, RoaCalibration, LQR_Q, LQR_R,
};
use swingup::dynamics::{forward_dynamics, total_energy, JointState, PlantParams, Simulator, Variant};
use swingup::linalg::Mat;
use swingup::policy::{init_policy, PolicyInit};

fn plant(v: Variant) -> PlantParams<f64> {
    PlantParams::default_for(v)
}

fn to_na(m: &Mat<f64>) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| m[(i, j)])
}

#[test]
fn linearization_matches_differences() {
    for v in [Variant::Pendubot, Variant::Acrobot] {
        let p = plant(v);
        let (a, b) = linearize_at_goal(&p);
        let h = 1e-6;
        let f = |x: [f64; 4], u: f64| {
            let s = JointState::new([PI + x[0], x[1]], [x[2], x[3]]);
            let qdd = forward_dynamics(&s, u, &p);
            [x[2], x[3], qdd[0], qdd[1]]
        };
        for j in 0..4 {
            let mut xp = [0.0; 4];
            let mut xm = [0.0; 4];
            xp[j] = h;
            xm[j] = -h;
            let (fp, fm) = (f(xp, 0.0), f(xm, 0.0));
            for i in 0..4 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((a[(i, j)] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{v} A[{i}][{j}]");
            }
        }
        let (fp, fm) = (f([0.0; 4], h), f([0.0; 4], -h));
        for i in 0..4 {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            assert!((b[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}

#[test]
fn riccati_solution_satisfies_oracle_checks() {
    for v in [Variant::Pendubot, Variant::Acrobot] {
        let p = plant(v);
        let (a, b) = linearize_at_goal(&p);
        let q = Mat::diag(&LQR_Q);
        let (k, s) = lqr_gain(&a, &b, &q, LQR_R).unwrap();
        let (a, s, q) = (to_na(&a), to_na(&s), to_na(&q));
        let bv = Vector4::from_column_slice(&b);
        assert!((s - s.transpose()).amax() < 1e-9 * s.amax());
        assert!(s.cholesky().is_some(), "{v}: S not positive definite");
        let kv = bv.transpose() * s / LQR_R;
        for i in 0..4 {
            assert!((kv[i] - k[i]).abs() < 1e-9 * (1.0 + k[i].abs()));
        }
        let kn = Vector4::from_column_slice(&k);
        let res = a.transpose() * s + s * a - kn * kn.transpose() * LQR_R + q;
        assert!(res.amax() < 1e-8, "{v}: residual {}", res.amax());
        let closed = a - bv * kn.transpose();
        for ev in closed.complex_eigenvalues().iter() {
            assert!(ev.re < 0.0, "{v}: closed-loop eigenvalue {ev}");
        }
    }
}

#[test]
fn lqr_holds_the_goal_at_fifty_hertz() {
    for v in [Variant::Pendubot, Variant::Acrobot] {
        let p = plant(v);
        let lqr = LqrStabilizer::design(&p, LQR_Q, LQR_R).unwrap();
        let mut sim = Simulator::new(p);
        // the acrobot's region is tiny because of torque saturation
        let a = if v == Variant::Acrobot { 0.1 } else { 1.0 };
        let mut x = JointState::new([PI + 0.02 * a, -0.01 * a], [0.0, 0.05 * a]);
        let mut u = 0.0;
        for _ in 0..500 {
            u = lqr.torque(&x);
            for _ in 0..10 {
                x = sim.step(&x, u).0;
            }
        }
        let e = goal_error(&x);
        assert!(e.iter().all(|v| v.abs() < 1e-6), "{v}: final error {e:?}");
        assert!(u.abs() < 1e-6, "{v}: final torque {u}");
    }
}

#[test]
fn calibrated_region_meets_success_rate() {
    let p = plant(Variant::Pendubot);
    let lqr = LqrStabilizer::design(&p, LQR_Q, LQR_R).unwrap();
    let cfg = RoaCalibration {
        samples: 40,
        duration: 3.0,
        ..RoaCalibration::default()
    };
    let cal = calibrate_roa(&p, &lqr, &cfg).unwrap();
    assert!(cal.rho > 0.0 && cal.rho <= cfg.rho_start);
    assert!(roa_success_rate(&p, &cal, &cfg) >= cfg.required_success);
}

#[test]
fn stabilizer_json_is_validated() {
    let lqr = LqrStabilizer::design(&plant(Variant::Acrobot), LQR_Q, LQR_R).unwrap();
    assert_eq!(LqrStabilizer::from_json(&lqr.to_json()).unwrap(), lqr);
    let mut bad = lqr.clone();
    bad.s[0][0] = -1.0;
    assert!(LqrStabilizer::from_json(&bad.to_json()).is_err());
    let mut bad = lqr.clone();
    bad.rho = 0.0;
    assert!(LqrStabilizer::from_json(&bad.to_json()).is_err());
}

#[test]
fn damping_removes_energy() {
    let p = plant(Variant::Pendubot);
    let mut sim = Simulator::new(p);
    let mut x = JointState::new([2.5, -1.0], [6.0, -4.0]);
    let mut last = total_energy(&x, &p);
    let start = last;
    for _ in 0..5000 {
        x = sim.step(&x, damping_controller(&x, 0.5, &p)).0;
        let e = total_energy(&x, &p);
        assert!(e <= last + 1e-6, "energy rose from {last} to {e}");
        last = e;
    }
    assert!(last < 0.5 * start);
}

#[test]
fn mode_machine_switches_with_hysteresis() {
    let p = plant(Variant::Pendubot);
    let policy = init_policy(0, &PolicyInit::default());
    let assets = ControllerAssets::pendubot(policy.clone());
    let d = DampingConfig::default();
    let fast = JointState::new([0.0, 0.0], [d.enter + 1.0, 0.0]);
    let medium = JointState::new([0.0, 0.0], [d.exit + 1.0, 0.0]);
    let slow = JointState::new([0.0, 0.0], [d.exit - 1.0, 0.0]);
    assert_eq!(controller_step(&fast, ControllerMode::Policy, &assets, &p).1, ControllerMode::Damping);
    assert_eq!(controller_step(&medium, ControllerMode::Damping, &assets, &p).1, ControllerMode::Damping);
    assert_eq!(controller_step(&medium, ControllerMode::Policy, &assets, &p).1, ControllerMode::Policy);
    let (u, m) = controller_step(&slow, ControllerMode::Damping, &assets, &p);
    assert_eq!(m, ControllerMode::Policy);
    assert_eq!(u, p.clamp_torque(policy.eval(&slow)));

    let pa = plant(Variant::Acrobot);
    let mut lqr = LqrStabilizer::design(&pa, LQR_Q, LQR_R).unwrap();
    lqr.rho = 0.5;
    let assets = ControllerAssets::acrobot(policy, lqr.clone());
    let near = JointState::new([PI + 1e-3, 0.0], [0.0; 2]);
    let (u, m) = controller_step(&near, ControllerMode::Policy, &assets, &pa);
    assert_eq!(m, ControllerMode::Lqr);
    assert_eq!(u, lqr.torque(&near));
    assert_eq!(controller_step(&JointState::zero(), ControllerMode::Lqr, &assets, &pa).1, ControllerMode::Policy);
}

proptest! {
    #[test]
    fn region_is_star_shaped_along_rays(e in prop::array::uniform4(-1.0..1.0f64), t in 0.0..1.0f64) {
        let lqr = LqrStabilizer { rho: 5.0, ..LqrStabilizer::design(&plant(Variant::Pendubot), LQR_Q, LQR_R).unwrap() };
        let at = |s: f64| JointState::new([PI + s * e[0], s * e[1]], [s * e[2], s * e[3]]);
        if in_roa(&at(1.0), &lqr) {
            prop_assert!(in_roa(&at(t), &lqr));
        }
        let far = lqr.cost_to_go(&at(1.0));
        prop_assert!(lqr.cost_to_go(&at(t)) <= far * (1.0 + 1e-12));
    }

    #[test]
    fn torque_is_saturated(e in prop::array::uniform4(-5.0..5.0f64)) {
        let lqr = LqrStabilizer::design(&plant(Variant::Acrobot), LQR_Q, LQR_R).unwrap();
        let u = lqr.torque(&JointState::new([PI + e[0], e[1]], [e[2], e[3]]));
        prop_assert!(u.abs() <= 3.0);
    }
}
