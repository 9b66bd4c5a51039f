use std::f64::consts::PI;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use swingup::dynamics::JointState;
use swingup::grad::{record_and_grad, Tape};
use swingup::policy::{
    apply_dropout, feature_map, init_policy, PolicyCheckpoint, PolicyInit, PolicyParams, RecordedPolicy, FEATURES,
};

fn policy(n: usize, seed: u64) -> PolicyParams<f64> {
    let mut p = init_policy(
        seed,
        &PolicyInit {
            n_basis: n,
            ..PolicyInit::default()
        },
    );
    for (r, row) in p.shape.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += 0.1 * ((r * 7 + c * 3 + seed as usize) % 5) as f64 - 0.2;
        }
    }
    p
}

fn features(x: [f64; 4]) -> [f64; FEATURES] {
    feature_map(&JointState::new([x[0], x[1]], [x[2], x[3]]))
}

#[test]
fn feature_gradient_matches_differences() {
    let p = policy(12, 1);
    for k in 0..10 {
        let phi = features([0.3 * k as f64, -0.5 + 0.2 * k as f64, 0.4 - 0.1 * k as f64, 0.2]);
        let (u, g) = p.eval_with_feature_grad(&phi);
        assert_eq!(u, p.eval_features(&phi));
        for d in 0..FEATURES {
            let h = 1e-6;
            let mut a = phi;
            let mut b = phi;
            a[d] += h;
            b[d] -= h;
            let fd = (p.eval_features(&a) - p.eval_features(&b)) / (2.0 * h);
            assert!((g[d] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "feature {d}: {} vs {fd}", g[d]);
        }
    }
}

#[test]
fn parameter_gradient_matches_differences() {
    let p = policy(6, 2);
    let phi = features([0.7, -1.1, 0.5, -0.3]);
    let mut g = vec![0.0; p.n_params()];
    p.accumulate_param_grad(&phi, 1.0, &mut g);
    let flat = p.to_flat();
    let h = 1e-6;
    for i in 0..flat.len() {
        let mut a = flat.clone();
        let mut b = flat.clone();
        a[i] += h;
        b[i] -= h;
        let fd = (p.with_flat(&a).eval_features(&phi) - p.with_flat(&b).eval_features(&phi)) / (2.0 * h);
        assert!((g[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {} vs {fd}", g[i]);
    }
}

#[test]
fn recorded_policy_gradient_matches_direct_gradient() {
    let p = policy(8, 3);
    let phi = features([2.0, 0.4, -1.0, 0.8]);
    let tape = Tape::new();
    let leaves = p.map(|v| tape.var(v));
    let phi_v = phi.map(|v| tape.var(v));
    let rec = RecordedPolicy::new(&leaves);
    let out = rec.eval(&tape, &phi_v);
    assert_eq!(out.val(), p.eval_features(&phi));
    let mut wrt = leaves.to_flat();
    wrt.extend_from_slice(&phi_v);
    let g = tape.gradient(out, &wrt).unwrap();
    let mut direct = vec![0.0; p.n_params()];
    p.accumulate_param_grad(&phi, 1.0, &mut direct);
    let (_, dphi) = p.eval_with_feature_grad(&phi);
    for (a, b) in g.iter().zip(direct.iter().chain(dphi.iter())) {
        assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
    }

    let via_generic = record_and_grad(&p, |q| q.eval_features(&phi.map(swingup::grad::Var::constant))).unwrap();
    for (a, b) in via_generic.grad.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
    }
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let p = policy(20, 4);
    let back = PolicyParams::from_json(&p.to_json()).unwrap();
    assert_eq!(back, p);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.json");
    p.save(&path).unwrap();
    assert_eq!(PolicyParams::load(&path).unwrap(), p);
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let p = policy(3, 5);
    let mut c = PolicyCheckpoint::from(&p);
    c.schema_version = 7;
    assert!(PolicyParams::from_json(&serde_json::to_string(&c).unwrap()).is_err());
    let mut c = PolicyCheckpoint::from(&p);
    c.weights.pop();
    assert!(PolicyParams::from_json(&serde_json::to_string(&c).unwrap()).is_err());
    let mut c = PolicyCheckpoint::from(&p);
    c.shape_factor.truncate(30);
    assert!(PolicyParams::from_json(&serde_json::to_string(&c).unwrap()).is_err());
}

#[test]
fn dropout_masks_weights_only() {
    let p = policy(400, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = apply_dropout(&p, 0.25, &mut rng);
    assert_eq!(d.params.centers, p.centers);
    assert_eq!(d.params.shape, p.shape);
    let dropped = d.scale.iter().filter(|&&s| s == 0.0).count();
    assert!((70..130).contains(&dropped), "{dropped} of 400 dropped");
    for ((w, m), s) in p.weights.iter().zip(&d.params.weights).zip(&d.scale) {
        assert!(*s == 0.0 || (*s - 1.0 / 0.75).abs() < 1e-15);
        assert_eq!(*m, w * s);
    }
    let none = apply_dropout(&p, 0.0, &mut rng);
    assert_eq!(none.params, p);
}

#[test]
fn initial_policy_is_seeded() {
    let a = init_policy(9, &PolicyInit::default());
    assert_eq!(a, init_policy(9, &PolicyInit::default()));
    assert_ne!(a, init_policy(10, &PolicyInit::default()));
    assert_eq!(a.n_basis(), 200);
    assert_eq!(a.n_params(), 200 * 7 + 36);
    assert!(a.weights.iter().all(|w| w.abs() <= 3.0));
    assert_eq!(a.shape_matrix()[2][2], 1.0);
}

fn state() -> impl Strategy<Value = [f64; 4]> {
    (-20.0..20.0f64, -20.0..20.0f64, -30.0..30.0f64, -30.0..30.0f64).prop_map(|(a, b, c, d)| [a, b, c, d])
}

proptest! {
    #[test]
    fn output_never_exceeds_torque_limit(x in state(), seed in 0u64..1000, scale in 0.1..100.0f64) {
        let mut p = policy(10, seed);
        p.weights.iter_mut().for_each(|w| *w *= scale);
        let u = p.eval(&JointState::new([x[0], x[1]], [x[2], x[3]]));
        prop_assert!(u.abs() <= p.u_max);
    }

    #[test]
    fn output_is_periodic_in_the_angles(x in state(), k1 in -3i32..3, k2 in -3i32..3) {
        let p = policy(10, 8);
        let a = p.eval(&JointState::new([x[0], x[1]], [x[2], x[3]]));
        let b = p.eval(&JointState::new([x[0] + 2.0 * PI * k1 as f64, x[1] + 2.0 * PI * k2 as f64], [x[2], x[3]]));
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn flat_layout_round_trips(seed in 0u64..500) {
        let p = policy(5, seed);
        prop_assert_eq!(p.with_flat(&p.to_flat()), p.clone());
    }
}
