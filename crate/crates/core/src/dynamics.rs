//! Rigid-body model of the two-link pendulum.
//!
//! Angles are measured from the hanging configuration: `q = [0, 0]` is the
//! stable rest state, `q = [π, 0]` the upright goal. `q2` is relative to link 1.
//! Inertias `I1`, `I2` are taken about the joint axes, so a point mass at
//! distance `r` has `I = m r²`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, Real};

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("invalid plant parameter `{name}` = {value}: {reason}")]
    Invalid {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("mass matrix is not positive definite for these parameters (min det {0:e})")]
    Indefinite(f64),
    #[error("unknown robot variant `{0}` (expected pendubot or acrobot)")]
    UnknownVariant(String),
    #[error("reading plant file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing plant file: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Which joint carries the motor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Shoulder actuated, elbow passive.
    #[default]
    Pendubot,
    /// Shoulder passive, elbow actuated.
    Acrobot,
}

impl Variant {
    /// Diagonal of the actuation matrix `B`.
    pub fn actuation<T: Real>(self) -> [T; 2] {
        match self {
            Variant::Pendubot => [T::one(), T::zero()],
            Variant::Acrobot => [T::zero(), T::one()],
        }
    }

    /// Index of the actuated joint.
    pub fn actuated_joint(self) -> usize {
        match self {
            Variant::Pendubot => 0,
            Variant::Acrobot => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Pendubot => "pendubot",
            Variant::Acrobot => "acrobot",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = PlantError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pendubot" => Ok(Variant::Pendubot),
            "acrobot" => Ok(Variant::Acrobot),
            other => Err(PlantError::UnknownVariant(other.to_string())),
        }
    }
}

/// Physical constants of the plant, SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantParams<T> {
    pub m1: T,
    pub m2: T,
    pub l1: T,
    pub l2: T,
    /// Joint-to-center-of-mass distances.
    pub r1: T,
    pub r2: T,
    /// Link inertias about the joint axes.
    pub i1: T,
    pub i2: T,
    /// Viscous damping coefficients.
    pub b1: T,
    pub b2: T,
    pub g: T,
    /// Torque limit `u_M`.
    pub torque_limit: T,
    pub variant: Variant,
}

impl<T: Real> PlantParams<T> {
    /// Non-authoritative defaults resembling the RealAIGym double pendulum:
    /// point masses at the link tips, no friction, 3 N·m torque limit.
    pub fn default_for(variant: Variant) -> Self {
        let (m1, m2, l1, l2) = (0.6, 0.6, 0.3, 0.2);
        Self {
            m1: lit(m1),
            m2: lit(m2),
            l1: lit(l1),
            l2: lit(l2),
            r1: lit(l1),
            r2: lit(l2),
            i1: lit(m1 * l1 * l1),
            i2: lit(m2 * l2 * l2),
            b1: T::zero(),
            b2: T::zero(),
            g: lit(9.81),
            torque_limit: lit(3.0),
            variant,
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let positive = [
            ("m1", self.m1),
            ("m2", self.m2),
            ("l1", self.l1),
            ("l2", self.l2),
            ("r1", self.r1),
            ("r2", self.r2),
            ("i1", self.i1),
            ("i2", self.i2),
            ("g", self.g),
            ("torque_limit", self.torque_limit),
        ];
        for (name, v) in positive {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(PlantError::Invalid {
                    name,
                    value: v.value(),
                    reason: "must be strictly positive and finite",
                });
            }
        }
        for (name, v) in [("b1", self.b1), ("b2", self.b2)] {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(PlantError::Invalid {
                    name,
                    value: v.value(),
                    reason: "must be non-negative and finite",
                });
            }
        }
        // det M(q) = I1 I2 + m2 l1² I2 − (m2 l1 r2 cos q2)², smallest at cos q2 = ±1.
        let h = self.m2 * self.l1 * self.r2;
        let min_det = self.i1 * self.i2 + self.m2 * self.l1 * self.l1 * self.i2 - h * h;
        if !(min_det > T::zero()) {
            return Err(PlantError::Indefinite(min_det.value()));
        }
        Ok(())
    }

    pub fn actuation(&self) -> [T; 2] {
        self.variant.actuation()
    }

    pub fn cast<U: Real>(&self) -> PlantParams<U> {
        let c = |x: T| lit::<U>(x.value());
        PlantParams {
            m1: c(self.m1),
            m2: c(self.m2),
            l1: c(self.l1),
            l2: c(self.l2),
            r1: c(self.r1),
            r2: c(self.r2),
            i1: c(self.i1),
            i2: c(self.i2),
            b1: c(self.b1),
            b2: c(self.b2),
            g: c(self.g),
            torque_limit: c(self.torque_limit),
            variant: self.variant,
        }
    }

    pub fn clamp_torque(&self, u: T) -> T {
        u.max(-self.torque_limit).min(self.torque_limit)
    }
}

/// On-disk form of [`PlantParams`]: a flat key-value file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PlantFile {
    pub variant: Variant,
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub r1: f64,
    pub r2: f64,
    pub i1: f64,
    pub i2: f64,
    pub b1: f64,
    pub b2: f64,
    pub g: f64,
    pub torque_limit: f64,
}

impl Default for PlantFile {
    fn default() -> Self {
        PlantParams::<f64>::default_for(Variant::Pendubot).into()
    }
}

impl From<PlantParams<f64>> for PlantFile {
    fn from(p: PlantParams<f64>) -> Self {
        Self {
            variant: p.variant,
            m1: p.m1,
            m2: p.m2,
            l1: p.l1,
            l2: p.l2,
            r1: p.r1,
            r2: p.r2,
            i1: p.i1,
            i2: p.i2,
            b1: p.b1,
            b2: p.b2,
            g: p.g,
            torque_limit: p.torque_limit,
        }
    }
}

impl From<PlantFile> for PlantParams<f64> {
    fn from(f: PlantFile) -> Self {
        Self {
            m1: f.m1,
            m2: f.m2,
            l1: f.l1,
            l2: f.l2,
            r1: f.r1,
            r2: f.r2,
            i1: f.i1,
            i2: f.i2,
            b1: f.b1,
            b2: f.b2,
            g: f.g,
            torque_limit: f.torque_limit,
            variant: f.variant,
        }
    }
}

impl PlantParams<f64> {
    pub fn from_toml_str(s: &str) -> Result<Self, PlantError> {
        let file: PlantFile = toml::from_str(s)?;
        let p: Self = file.into();
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, PlantError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&PlantFile::from(*self)).expect("flat struct serializes")
    }
}

/// Joint positions (rad) and velocities (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointState<T> {
    pub q: [T; 2],
    pub qd: [T; 2],
}

impl<T: Real> JointState<T> {
    pub fn new(q: [T; 2], qd: [T; 2]) -> Self {
        Self { q, qd }
    }

    pub fn zero() -> Self {
        Self::new([T::zero(); 2], [T::zero(); 2])
    }

    /// The upright equilibrium `[π, 0, 0, 0]`.
    pub fn goal() -> Self {
        Self::new([T::PI(), T::zero()], [T::zero(); 2])
    }

    pub fn from_array(x: [T; 4]) -> Self {
        Self::new([x[0], x[1]], [x[2], x[3]])
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.q[0], self.q[1], self.qd[0], self.qd[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    pub fn max_speed(&self) -> T {
        self.qd[0].abs().max(self.qd[1].abs())
    }

    /// Positions wrapped into (−π, π].
    pub fn wrapped(&self) -> Self {
        Self::new([wrap_angle(self.q[0]), wrap_angle(self.q[1])], self.qd)
    }

    pub fn cast<U: Real>(&self) -> JointState<U> {
        JointState::from_array(self.to_array().map(|x| lit::<U>(x.value())))
    }
}

/// Mass matrix `M(q)` of the two-link manipulator (symmetric, positive definite).
pub fn mass_matrix<T: Real>(q: [T; 2], p: &PlantParams<T>) -> [[T; 2]; 2] {
    let h = p.m2 * p.l1 * p.r2 * q[1].cos();
    let m11 = p.i1 + p.i2 + p.m2 * p.l1 * p.l1 + h + h;
    let m12 = p.i2 + h;
    [[m11, m12], [m12, p.i2]]
}

/// Coriolis, centrifugal, gravity and viscous damping torques `n(q, q̇)`.
pub fn bias_terms<T: Real>(q: [T; 2], qd: [T; 2], p: &PlantParams<T>) -> [T; 2] {
    let s1 = q[0].sin();
    let s2 = q[1].sin();
    let s12 = (q[0] + q[1]).sin();
    let h = p.m2 * p.l1 * p.r2 * s2;
    let two: T = lit(2.0);
    let coriolis = [
        -two * h * qd[0] * qd[1] - h * qd[1] * qd[1],
        h * qd[0] * qd[0],
    ];
    let g2 = p.m2 * p.g * p.r2 * s12;
    let gravity = [p.m1 * p.g * p.r1 * s1 + p.m2 * p.g * p.l1 * s1 + g2, g2];
    [
        coriolis[0] + gravity[0] + p.b1 * qd[0],
        coriolis[1] + gravity[1] + p.b2 * qd[1],
    ]
}

/// Solves a 2x2 linear system by the explicit inverse.
#[inline]
pub(crate) fn solve2<T: Real>(m: [[T; 2]; 2], b: [T; 2]) -> [T; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [
        (m[1][1] * b[0] - m[0][1] * b[1]) / det,
        (m[0][0] * b[1] - m[1][0] * b[0]) / det,
    ]
}

/// Joint accelerations `q̈ = M(q)⁻¹ (B u − n(q, q̇))`.
///
/// `u` is the scalar motor torque; it is saturated at `±u_M` first.
pub fn forward_dynamics<T: Real>(state: &JointState<T>, u: T, p: &PlantParams<T>) -> [T; 2] {
    let u = p.clamp_torque(u);
    let b = p.actuation();
    let n = bias_terms(state.q, state.qd, p);
    let rhs = [b[0] * u - n[0], b[1] * u - n[1]];
    solve2(mass_matrix(state.q, p), rhs)
}

/// One classical Runge–Kutta step with the torque held constant.
pub fn rk4_step<T: Real>(state: &JointState<T>, u: T, dt: T, p: &PlantParams<T>) -> JointState<T> {
    let deriv = |s: &JointState<T>| -> [T; 4] {
        let qdd = forward_dynamics(s, u, p);
        [s.qd[0], s.qd[1], qdd[0], qdd[1]]
    };
    let x = state.to_array();
    let shift = |k: &[T; 4], h: T| -> JointState<T> {
        JointState::from_array([x[0] + h * k[0], x[1] + h * k[1], x[2] + h * k[2], x[3] + h * k[3]])
    };
    let half = dt * lit(0.5);
    let k1 = deriv(state);
    let k2 = deriv(&shift(&k1, half));
    let k3 = deriv(&shift(&k2, half));
    let k4 = deriv(&shift(&k3, dt));
    let sixth = dt / lit(6.0);
    let two: T = lit(2.0);
    let mut out = [T::zero(); 4];
    for i in 0..4 {
        out[i] = x[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
    }
    JointState::from_array(out)
}

/// Kinetic plus potential energy, zero at the hanging rest state.
pub fn total_energy<T: Real>(state: &JointState<T>, p: &PlantParams<T>) -> T {
    let m = mass_matrix(state.q, p);
    let qd = state.qd;
    let kinetic = lit::<T>(0.5)
        * (m[0][0] * qd[0] * qd[0] + lit::<T>(2.0) * m[0][1] * qd[0] * qd[1] + m[1][1] * qd[1] * qd[1]);
    kinetic + potential_energy(state.q, p)
}

pub fn potential_energy<T: Real>(q: [T; 2], p: &PlantParams<T>) -> T {
    let one = T::one();
    let c1 = q[0].cos();
    let c12 = (q[0] + q[1]).cos();
    p.g * (p.m1 * p.r1 * (one - c1) + p.m2 * (p.l1 * (one - c1) + p.r2 * (one - c12)))
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle<T: Real>(q: T) -> T {
    let two_pi = T::PI() + T::PI();
    let k = ((q - T::PI()) / two_pi).ceil();
    let w = q - k * two_pi;
    // Guard against rounding placing the result just outside the interval.
    if w <= -T::PI() {
        w + two_pi
    } else if w > T::PI() {
        w - two_pi
    } else {
        w
    }
}

/// Fixed-rate simulator that saturates torques and counts clamp events.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub params: PlantParams<f64>,
    pub dt: f64,
    clamp_events: u64,
}

impl Simulator {
    /// 500 Hz integration rate.
    pub const DEFAULT_DT: f64 = 0.002;

    pub fn new(params: PlantParams<f64>) -> Self {
        Self::with_dt(params, Self::DEFAULT_DT)
    }

    pub fn with_dt(params: PlantParams<f64>, dt: f64) -> Self {
        assert!(dt > 0.0, "simulation step must be positive");
        Self {
            params,
            dt,
            clamp_events: 0,
        }
    }

    /// Advances one integration step. Returns the torque actually applied.
    pub fn step(&mut self, state: &JointState<f64>, u: f64) -> (JointState<f64>, f64) {
        let applied = self.params.clamp_torque(u);
        if applied != u {
            if self.clamp_events == 0 {
                log::debug!("torque {u:.3} saturated at {applied:.3}");
            }
            self.clamp_events += 1;
        }
        (rk4_step(state, applied, self.dt, &self.params), applied)
    }

    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn params() -> PlantParams<f64> {
        PlantParams::default_for(Variant::Pendubot)
    }

    #[test]
    fn equilibria_have_zero_bias_and_acceleration() {
        let p = params();
        for q in [[0.0, 0.0], [PI, 0.0]] {
            let n = bias_terms(q, [0.0, 0.0], &p);
            assert!(n[0].abs() < 1e-12 && n[1].abs() < 1e-12, "{n:?}");
            let qdd = forward_dynamics(&JointState::new(q, [0.0; 2]), 0.0, &p);
            assert!(qdd[0].abs() < 1e-12 && qdd[1].abs() < 1e-12);
        }
    }

    #[test]
    fn rk4_fixed_point() {
        let s = JointState::<f64>::zero();
        assert_eq!(rk4_step(&s, 0.0, 0.002, &params()), s);
    }

    #[test]
    fn energy_reference_values() {
        let p = params();
        assert_eq!(total_energy(&JointState::zero(), &p), 0.0);
        let up = total_energy(&JointState::goal(), &p);
        let expect = 2.0 * p.g * (p.m1 * p.r1 + p.m2 * (p.l1 + p.r2));
        assert!((up - expect).abs() < 1e-12);
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(1.5 * PI) + 0.5 * PI).abs() < 1e-12);
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(7.0 * PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        let mut p = params();
        p.m1 = 0.0;
        assert!(matches!(p.validate(), Err(PlantError::Invalid { name: "m1", .. })));
        let mut p = params();
        p.b2 = -0.1;
        assert!(p.validate().is_err());
        let mut p = params();
        p.i2 = 1e-4;
        p.i1 = 1e-4;
        assert!(matches!(p.validate(), Err(PlantError::Indefinite(_))));
        assert!(params().validate().is_ok());
    }

    #[test]
    fn plant_file_round_trip() {
        let mut p = PlantParams::<f64>::default_for(Variant::Acrobot);
        p.b1 = 0.01;
        let s = p.to_toml_string();
        assert_eq!(PlantParams::from_toml_str(&s).unwrap(), p);
        let partial = PlantParams::from_toml_str("variant = \"acrobot\"\nm1 = 0.7\n").unwrap();
        assert_eq!(partial.variant, Variant::Acrobot);
        assert_eq!(partial.m1, 0.7);
        assert!(PlantParams::from_toml_str("mass = 1.0").is_err());
    }

    #[test]
    fn simulator_counts_clamps() {
        let mut sim = Simulator::new(params());
        let (_, applied) = sim.step(&JointState::zero(), 10.0);
        assert_eq!(applied, 3.0);
        sim.step(&JointState::zero(), 1.0);
        assert_eq!(sim.clamp_events(), 1);
    }

    #[test]
    fn f32_matches_f64() {
        let s = JointState::new([0.3f64, -1.1], [0.5, 2.0]);
        let a = forward_dynamics(&s, 1.0, &params());
        let b = forward_dynamics(&s.cast::<f32>(), 1.0f32, &params().cast::<f32>());
        assert!((a[0] - b[0] as f64).abs() < 1e-3 && (a[1] - b[1] as f64).abs() < 1e-3);
    }
}
