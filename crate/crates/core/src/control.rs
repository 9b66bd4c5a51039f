//! Deployable controller: policy at the control rate, a damping fallback at
//! high speed, and LQR stabilization near the upright equilibrium.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{mass_matrix, wrap_angle, JointState, PlantParams, Simulator};
use crate::linalg::{lu_solve, Cholesky, LinalgError, Mat};
use crate::policy::PolicyParams;

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error("Riccati iteration did not converge (residual norm {residual:e})")]
    RiccatiNotConverged { residual: f64 },
    #[error("linear algebra failure: {0}")]
    Linalg(#[from] LinalgError),
    #[error("invalid LQR file: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no stabilizing region found: best success rate {rate:.2} at rho {rho:e}")]
    Calibration { rate: f64, rho: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ControllerMode {
    Policy,
    Damping,
    Lqr,
}

impl ControllerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerMode::Policy => "POLICY",
            ControllerMode::Damping => "DAMPING",
            ControllerMode::Lqr => "LQR",
        }
    }
}

impl fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `−D · q̇_a` on the actuated joint, saturated at `u_M`.
pub fn damping_controller(state: &JointState<f64>, gain: f64, plant: &PlantParams<f64>) -> f64 {
    assert!(gain > 0.0, "damping gain must be positive");
    let qd = state.qd[plant.variant.actuated_joint()];
    plant.clamp_torque(-gain * qd)
}

/// Velocity hysteresis for the damping fallback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DampingConfig {
    pub gain: f64,
    /// Switch to damping when `max |q̇| ≥ enter`.
    pub enter: f64,
    /// Return to the policy when `max |q̇| < exit`.
    pub exit: f64,
}

impl Default for DampingConfig {
    fn default() -> Self {
        Self {
            gain: 0.5,
            enter: 20.0,
            exit: 4.0,
        }
    }
}

/// Upright equilibrium `[π, 0, 0, 0]`.
pub const GOAL: [f64; 4] = [PI, 0.0, 0.0, 0.0];

/// State error to the upright equilibrium with wrapped angles.
pub fn goal_error(state: &JointState<f64>) -> [f64; 4] {
    [
        wrap_angle(state.q[0] - PI),
        wrap_angle(state.q[1]),
        state.qd[0],
        state.qd[1],
    ]
}

/// Continuous-time linearization `ẋ ≈ A e + b u` at the upright equilibrium.
pub fn linearize_at_goal(plant: &PlantParams<f64>) -> (Mat<f64>, [f64; 4]) {
    let p = plant;
    let m = mass_matrix([PI, 0.0], p);
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let minv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    // gravity stiffness ∂G/∂q at q = [π, 0]
    let g2 = -p.m2 * p.g * p.r2;
    let dg = [[-p.m1 * p.g * p.r1 - p.m2 * p.g * p.l1 + g2, g2], [g2, g2]];
    let damp = [p.b1, p.b2];
    let act = plant.actuation();
    let mut a = Mat::zeros(4, 4);
    a[(0, 2)] = 1.0;
    a[(1, 3)] = 1.0;
    for i in 0..2 {
        for j in 0..2 {
            a[(2 + i, j)] = -(minv[i][0] * dg[0][j] + minv[i][1] * dg[1][j]);
            a[(2 + i, 2 + j)] = -minv[i][j] * damp[j];
        }
    }
    let b = [
        0.0,
        0.0,
        minv[0][0] * act[0] + minv[0][1] * act[1],
        minv[1][0] * act[0] + minv[1][1] * act[1],
    ];
    (a, b)
}

/// `AᵀS + SA − S b R⁻¹ bᵀ S + Q`, with the quadratic term formed as
/// `Kᵀ R K` to keep intermediates small.
pub fn care_residual(a: &Mat<f64>, b: &[f64], q: &Mat<f64>, r: f64, s: &Mat<f64>) -> Mat<f64> {
    let k = gain_row(b, s, r);
    a.transpose()
        .matmul(s)
        .add(&s.matmul(a))
        .sub(&outer(&k, &k).scale(r))
        .add(q)
}

/// `K = R⁻¹ bᵀ S`.
fn gain_row(b: &[f64], s: &Mat<f64>, r: f64) -> Vec<f64> {
    (0..s.cols()).map(|j| (0..b.len()).map(|i| b[i] * s[(i, j)]).sum::<f64>() / r).collect()
}

fn outer(a: &[f64], b: &[f64]) -> Mat<f64> {
    Mat::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}

/// Solves `Fᵀ X + X F = −C` for `X` through the Kronecker form.
fn lyapunov(f: &Mat<f64>, c: &Mat<f64>) -> Result<Mat<f64>, LinalgError> {
    let n = f.rows();
    let mut big = Mat::zeros(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for k in 0..n {
                big[(row, k * n + j)] += f[(k, i)];
                big[(row, i * n + k)] += f[(k, j)];
            }
        }
    }
    let rhs: Vec<f64> = c.as_slice().iter().map(|v| -v).collect();
    let x = lu_solve(&big, &rhs)?;
    Ok(Mat::from_fn(n, n, |i, j| x[i * n + j]).symmetrize())
}

/// Matrix sign function by scaled Newton iteration.
fn matrix_sign(h: &Mat<f64>) -> Result<Mat<f64>, LinalgError> {
    let n = h.rows();
    let mut z = h.clone();
    for _ in 0..100 {
        let zi = crate::linalg::inverse(&z)?;
        let det = crate::linalg::determinant(&z).abs();
        let c = if det.is_finite() && det > 0.0 {
            det.powf(1.0 / n as f64)
        } else {
            1.0
        };
        let next = z.scale(0.5 / c).add(&zi.scale(0.5 * c));
        let change = next.sub(&z).norm();
        z = next;
        if change <= 1e-13 * z.norm() {
            break;
        }
    }
    Ok(z)
}

/// Infinite-horizon LQR for a single input: returns `K = R⁻¹ bᵀ S` and `S`.
///
/// The stabilizing solution is located with the Hamiltonian sign function
/// and then polished with Newton–Kleinman steps until the residual norm is
/// below `1e-10`.
pub fn lqr_gain(a: &Mat<f64>, b: &[f64], q: &Mat<f64>, r: f64) -> Result<(Vec<f64>, Mat<f64>), ControlError> {
    assert!(r > 0.0, "R must be positive");
    let n = a.rows();
    assert!(a.is_square() && b.len() == n && q.rows() == n);
    let g = outer(b, b).scale(1.0 / r);
    let h = Mat::from_fn(2 * n, 2 * n, |i, j| match (i < n, j < n) {
        (true, true) => a[(i, j)],
        (true, false) => -g[(i, j - n)],
        (false, true) => -q[(i - n, j)],
        (false, false) => -a[(j - n, i - n)],
    });
    let w = matrix_sign(&h)?;
    // [W12; W22 + I] S = −[W11 + I; W21], solved in the least-squares sense
    let lhs = Mat::from_fn(2 * n, n, |i, j| w[(i, n + j)] + if i == n + j { 1.0 } else { 0.0 });
    let rhs = Mat::from_fn(2 * n, n, |i, j| -(w[(i, j)] + if i == j { 1.0 } else { 0.0 }));
    let normal = lhs.transpose().matmul(&lhs);
    let proj = lhs.transpose().matmul(&rhs);
    let mut s = Mat::zeros(n, n);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| proj[(i, j)]).collect();
        let x = lu_solve(&normal, &col)?;
        for i in 0..n {
            s[(i, j)] = x[i];
        }
    }
    s = s.symmetrize();

    let mut residual = care_residual(a, b, q, r, &s).norm();
    for _ in 0..50 {
        if residual < 1e-10 {
            break;
        }
        // Newton step in correction form: (A − GS)ᵀ ΔS + ΔS (A − GS) = −Res(S)
        let k = gain_row(b, &s, r);
        let closed = a.sub(&outer(b, &k));
        let delta = lyapunov(&closed, &care_residual(a, b, q, r, &s))?;
        let next = s.add(&delta).symmetrize();
        let next_res = care_residual(a, b, q, r, &next).norm();
        if !(next_res < residual) {
            break;
        }
        s = next;
        residual = next_res;
    }
    if !(residual < 1e-8) {
        return Err(ControlError::RiccatiNotConverged { residual });
    }
    Ok((gain_row(b, &s, r), s))
}

/// LQR around the upright equilibrium with a quadratic region of attraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrStabilizer {
    pub schema_version: u32,
    pub k: [f64; 4],
    pub s: [[f64; 4]; 4],
    pub rho: f64,
    pub goal: [f64; 4],
    pub u_max: f64,
}

/// Default LQR weights.
pub const LQR_Q: [f64; 4] = [10.0, 10.0, 1.0, 1.0];
pub const LQR_R: f64 = 10.0;

impl LqrStabilizer {
    pub const SCHEMA_VERSION: u32 = 1;

    /// Gain and cost-to-go for `plant` with `Q = diag(q_diag)`; `rho` is left
    /// at `1` until calibrated.
    pub fn design(plant: &PlantParams<f64>, q_diag: [f64; 4], r: f64) -> Result<Self, ControlError> {
        let (a, b) = linearize_at_goal(plant);
        let (k, s) = lqr_gain(&a, &b, &Mat::diag(&q_diag), r)?;
        Ok(Self {
            schema_version: Self::SCHEMA_VERSION,
            k: [k[0], k[1], k[2], k[3]],
            s: std::array::from_fn(|i| std::array::from_fn(|j| s[(i, j)])),
            rho: 1.0,
            goal: GOAL,
            u_max: plant.torque_limit,
        })
    }

    pub fn cost_to_go(&self, state: &JointState<f64>) -> f64 {
        let e = goal_error(state);
        let mut v = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                v += e[i] * self.s[i][j] * e[j];
            }
        }
        v
    }

    pub fn torque(&self, state: &JointState<f64>) -> f64 {
        let e = goal_error(state);
        let u = -(0..4).map(|i| self.k[i] * e[i]).sum::<f64>();
        u.clamp(-self.u_max, self.u_max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("LQR serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ControlError> {
        let lqr: Self = serde_json::from_str(s).map_err(|e| ControlError::Format(e.to_string()))?;
        if lqr.schema_version != Self::SCHEMA_VERSION {
            return Err(ControlError::Format(format!("unsupported schema version {}", lqr.schema_version)));
        }
        if !(lqr.rho > 0.0) {
            return Err(ControlError::Format("rho must be positive".into()));
        }
        let s = Mat::from_fn(4, 4, |i, j| lqr.s[i][j]);
        if s.sub(&s.transpose()).max_abs() > 1e-9 * s.max_abs() || Cholesky::new(&s).is_err() {
            return Err(ControlError::Format("S must be symmetric positive definite".into()));
        }
        Ok(lqr)
    }

    pub fn save(&self, path: &Path) -> Result<(), ControlError> {
        crate::io::write_atomic(path, self.to_json().as_bytes()).map_err(|source| ControlError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ControlError> {
        let text = std::fs::read_to_string(path).map_err(|source| ControlError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// `eᵀ S e < ρ` on the wrapped goal error.
pub fn in_roa(state: &JointState<f64>, lqr: &LqrStabilizer) -> bool {
    lqr.cost_to_go(state) < lqr.rho
}

/// Settings for the simulation-based estimate of `ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoaCalibration {
    pub samples: usize,
    pub required_success: f64,
    /// Closed-loop simulation length per sample.
    pub duration: f64,
    pub rho_start: f64,
    pub shrink: f64,
    pub max_rounds: usize,
    pub seed: u64,
    /// Final-state tolerance counted as converged.
    pub q_tol: f64,
    pub qd_tol: f64,
}

impl Default for RoaCalibration {
    fn default() -> Self {
        Self {
            samples: 100,
            required_success: 0.95,
            duration: 5.0,
            rho_start: 20.0,
            shrink: 0.8,
            max_rounds: 60,
            seed: 0,
            q_tol: 0.1,
            qd_tol: 0.5,
        }
    }
}

/// Draws a state uniformly from the ellipsoid `eᵀSe < ρ`.
pub fn sample_in_roa<R: Rng + ?Sized>(lqr: &LqrStabilizer, rng: &mut R) -> JointState<f64> {
    let s = Mat::from_fn(4, 4, |i, j| lqr.s[i][j]);
    let chol = Cholesky::new(&s).expect("S is positive definite");
    let mut z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u: f64 = rng.random();
    let radius = lqr.rho.sqrt() * u.powf(0.25);
    z.iter_mut().for_each(|v| *v *= radius / norm);
    let e = chol.solve_upper(&z);
    JointState::new([PI + e[0], e[1]], [e[2], e[3]])
}

/// Fraction of ellipsoid samples that reach the goal tolerance under LQR
/// alone (500 Hz plant, 50 Hz zero-order hold).
pub fn roa_success_rate(plant: &PlantParams<f64>, lqr: &LqrStabilizer, cfg: &RoaCalibration) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = (cfg.duration / 0.02).round() as usize;
    let mut ok = 0;
    for _ in 0..cfg.samples {
        let mut x = sample_in_roa(lqr, &mut rng);
        let mut sim = Simulator::new(*plant);
        for _ in 0..steps {
            let u = lqr.torque(&x);
            for _ in 0..10 {
                x = sim.step(&x, u).0;
            }
            if !x.is_finite() {
                break;
            }
        }
        let e = goal_error(&x);
        if x.is_finite() && e[0].abs() < cfg.q_tol && e[1].abs() < cfg.q_tol && e[2].abs() < cfg.qd_tol && e[3].abs() < cfg.qd_tol {
            ok += 1;
        }
    }
    ok as f64 / cfg.samples as f64
}

/// Shrinks `ρ` geometrically from `rho_start` until the sampled success rate
/// reaches `required_success`. Returns the calibrated stabilizer.
pub fn calibrate_roa(plant: &PlantParams<f64>, lqr: &LqrStabilizer, cfg: &RoaCalibration) -> Result<LqrStabilizer, ControlError> {
    let mut cand = lqr.clone();
    cand.rho = cfg.rho_start;
    let mut best = (0.0, cand.rho);
    for _ in 0..cfg.max_rounds {
        let rate = roa_success_rate(plant, &cand, cfg);
        log::debug!("rho {:.4e}: success rate {rate:.2}", cand.rho);
        if rate >= cfg.required_success {
            return Ok(cand);
        }
        if rate > best.0 {
            best = (rate, cand.rho);
        }
        cand.rho *= cfg.shrink;
    }
    Err(ControlError::Calibration { rate: best.0, rho: best.1 })
}

/// Immutable controller assets.
#[derive(Debug, Clone, Default)]
pub struct ControllerAssets {
    pub policy: Option<PolicyParams<f64>>,
    pub lqr: Option<LqrStabilizer>,
    /// Damping fallback; `None` disables the DAMPING mode.
    pub damping: Option<DampingConfig>,
    /// LQR leaves when the cost-to-go exceeds `exit_factor · ρ`.
    pub lqr_exit_factor: f64,
}

impl ControllerAssets {
    /// Policy with the damping fallback and no LQR.
    pub fn pendubot(policy: PolicyParams<f64>) -> Self {
        Self {
            policy: Some(policy),
            lqr: None,
            damping: Some(DampingConfig::default()),
            lqr_exit_factor: 2.0,
        }
    }

    /// Policy with LQR stabilization and no damping fallback.
    pub fn acrobot(policy: PolicyParams<f64>, lqr: LqrStabilizer) -> Self {
        Self {
            policy: Some(policy),
            lqr: Some(lqr),
            damping: None,
            lqr_exit_factor: 2.0,
        }
    }
}

/// One control-rate step of the mode machine. The mode is decided from the
/// current state before any torque is computed.
pub fn controller_step(
    state: &JointState<f64>,
    mode: ControllerMode,
    assets: &ControllerAssets,
    plant: &PlantParams<f64>,
) -> (f64, ControllerMode) {
    let speed = state.max_speed();
    let next = match mode {
        ControllerMode::Policy => match (&assets.damping, &assets.lqr) {
            (Some(d), _) if speed >= d.enter => ControllerMode::Damping,
            (_, Some(l)) if in_roa(state, l) => ControllerMode::Lqr,
            _ => ControllerMode::Policy,
        },
        ControllerMode::Damping => match &assets.damping {
            Some(d) if speed >= d.exit => ControllerMode::Damping,
            _ => ControllerMode::Policy,
        },
        ControllerMode::Lqr => match &assets.lqr {
            Some(l) if l.cost_to_go(state) <= assets.lqr_exit_factor * l.rho => ControllerMode::Lqr,
            _ => ControllerMode::Policy,
        },
    };
    let u = match next {
        ControllerMode::Policy => assets.policy.as_ref().map_or(0.0, |p| p.eval(state)),
        ControllerMode::Damping => {
            let d = assets.damping.as_ref().expect("damping mode requires damping assets");
            damping_controller(state, d.gain, plant)
        }
        ControllerMode::Lqr => assets.lqr.as_ref().expect("LQR mode requires LQR assets").torque(state),
    };
    (plant.clamp_torque(u), next)
}

/// Anything the harness can run at the control rate.
pub trait Controller {
    fn name(&self) -> &str;
    /// Restores the initial internal state.
    fn reset(&mut self);
    fn step(&mut self, state: &JointState<f64>) -> (f64, ControllerMode);
}

/// The policy / damping / LQR mode machine with owned assets.
#[derive(Debug, Clone)]
pub struct StackController {
    pub name: String,
    pub assets: ControllerAssets,
    pub plant: PlantParams<f64>,
    mode: ControllerMode,
}

impl StackController {
    pub fn new(name: impl Into<String>, assets: ControllerAssets, plant: PlantParams<f64>) -> Self {
        Self {
            name: name.into(),
            assets,
            plant,
            mode: ControllerMode::Policy,
        }
    }

    /// Outputs zero torque in every state.
    pub fn zero(plant: PlantParams<f64>) -> Self {
        Self::new("zero", ControllerAssets::default(), plant)
    }

    pub fn mode(&self) -> ControllerMode {
        self.mode
    }
}

impl Controller for StackController {
    fn name(&self) -> &str {
        &self.name
    }

    fn reset(&mut self) {
        self.mode = ControllerMode::Policy;
    }

    fn step(&mut self, state: &JointState<f64>) -> (f64, ControllerMode) {
        let (u, next) = controller_step(state, self.mode, &self.assets, &self.plant);
        self.mode = next;
        (u, next)
    }
}
