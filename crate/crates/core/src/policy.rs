//! Squashed radial-basis-function policy.
//!
//! ```text
//! u(x) = u_M · tanh( Σ_i (w_i / u_M) · exp(−‖L (a_i − φ(x))‖²) )
//! φ(x) = [q̇1, q̇2, cos q1, cos q2, sin q1, sin q2]
//! ```
//!
//! The basis shape `Σ_π = LᵀL` is stored through its square factor `L`, which
//! keeps it positive semi-definite under unconstrained gradient steps.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::JointState;
use crate::grad::{Tape, Var};
use crate::scalar::{lit, Real};

pub const FEATURES: usize = 6;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("policy checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported policy checkpoint schema version {0}")]
    Schema(u32),
    #[error("malformed policy checkpoint: {0}")]
    Malformed(String),
}

/// Parameters `θ = {w, A, L}` plus the output bound `u_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    pub weights: Vec<T>,
    pub centers: Vec<[T; FEATURES]>,
    /// Square factor `L` of the shape matrix, `Σ_π = LᵀL`.
    pub shape: [[T; FEATURES]; FEATURES],
    pub u_max: T,
}

/// `[q̇1, q̇2, cos q1, cos q2, sin q1, sin q2]`.
pub fn feature_map<T: Real>(state: &JointState<T>) -> [T; FEATURES] {
    let (s1, c1) = (state.q[0].sin(), state.q[0].cos());
    let (s2, c2) = (state.q[1].sin(), state.q[1].cos());
    [state.qd[0], state.qd[1], c1, c2, s1, s2]
}

impl<T: Real> PolicyParams<T> {
    pub fn n_basis(&self) -> usize {
        self.weights.len()
    }

    /// Number of learnable scalars.
    pub fn n_params(&self) -> usize {
        self.weights.len() * (1 + FEATURES) + FEATURES * FEATURES
    }

    /// Policy with `n` zero-weight bases (outputs zero everywhere).
    pub fn zeros(n: usize, u_max: T) -> Self {
        let mut shape = [[T::zero(); FEATURES]; FEATURES];
        for (i, row) in shape.iter_mut().enumerate() {
            row[i] = T::one();
        }
        Self {
            weights: vec![T::zero(); n],
            centers: vec![[T::zero(); FEATURES]; n],
            shape,
            u_max,
        }
    }

    /// Applies `f` to every learnable scalar; `u_max` is carried over as a constant.
    pub fn map<U: Real>(&self, mut f: impl FnMut(T) -> U) -> PolicyParams<U> {
        PolicyParams {
            weights: self.weights.iter().map(|&w| f(w)).collect(),
            centers: self.centers.iter().map(|c| c.map(&mut f)).collect(),
            shape: self.shape.map(|row| row.map(&mut f)),
            u_max: lit(self.u_max.value()),
        }
    }

    /// Learnable scalars in the order `w`, `A` (row-major), `L` (row-major).
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(&self.weights);
        for c in &self.centers {
            out.extend_from_slice(c);
        }
        for row in &self.shape {
            out.extend_from_slice(row);
        }
        out
    }

    /// Copy with learnable scalars replaced from a flat vector in
    /// [`to_flat`](Self::to_flat) order.
    pub fn with_flat(&self, flat: &[T]) -> Self {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let n = self.n_basis();
        let weights = flat[..n].to_vec();
        let centers = (0..n)
            .map(|i| {
                let mut c = [T::zero(); FEATURES];
                c.copy_from_slice(&flat[n + i * FEATURES..n + (i + 1) * FEATURES]);
                c
            })
            .collect();
        let base = n * (1 + FEATURES);
        let mut shape = [[T::zero(); FEATURES]; FEATURES];
        for (r, row) in shape.iter_mut().enumerate() {
            row.copy_from_slice(&flat[base + r * FEATURES..base + (r + 1) * FEATURES]);
        }
        Self {
            weights,
            centers,
            shape,
            u_max: self.u_max,
        }
    }

    /// `Σ_π = LᵀL`.
    pub fn shape_matrix(&self) -> [[T; FEATURES]; FEATURES] {
        let mut s = [[T::zero(); FEATURES]; FEATURES];
        for i in 0..FEATURES {
            for j in 0..FEATURES {
                let mut acc = T::zero();
                for k in 0..FEATURES {
                    acc = acc + self.shape[k][i] * self.shape[k][j];
                }
                s[i][j] = acc;
            }
        }
        s
    }

    /// Pre-squash activation `Σ_i (w_i/u_M) exp(−‖L(a_i − φ)‖²)`.
    pub fn activation(&self, phi: &[T; FEATURES]) -> T {
        let mut sum = T::zero();
        for (w, a) in self.weights.iter().zip(&self.centers) {
            let d: [T; FEATURES] = std::array::from_fn(|k| a[k] - phi[k]);
            let mut norm = T::zero();
            for row in &self.shape {
                let z = row.iter().zip(&d).fold(T::zero(), |acc, (&l, &dk)| acc + l * dk);
                norm = norm + z * z;
            }
            sum = sum + *w / self.u_max * (-norm).exp();
        }
        sum
    }

    /// Policy output on a feature vector.
    pub fn eval_features(&self, phi: &[T; FEATURES]) -> T {
        self.u_max * self.activation(phi).tanh()
    }

    /// Policy output `π_θ(x)`.
    pub fn eval(&self, state: &JointState<T>) -> T {
        self.eval_features(&feature_map(state))
    }
}

/// Intermediate quantities of one basis-function evaluation.
struct BasisTerms<T> {
    d: [T; FEATURES],
    z: [T; FEATURES],
    e: T,
}

impl<T: Real> PolicyParams<T> {
    fn basis_terms(&self, i: usize, phi: &[T; FEATURES]) -> BasisTerms<T> {
        let a = &self.centers[i];
        let d: [T; FEATURES] = std::array::from_fn(|k| a[k] - phi[k]);
        let z: [T; FEATURES] = std::array::from_fn(|r| {
            self.shape[r].iter().zip(&d).fold(T::zero(), |acc, (&l, &dk)| acc + l * dk)
        });
        let norm = z.iter().fold(T::zero(), |acc, &zk| acc + zk * zk);
        BasisTerms { d, z, e: (-norm).exp() }
    }

    /// Output and its gradient with respect to the features.
    pub fn eval_with_feature_grad(&self, phi: &[T; FEATURES]) -> (T, [T; FEATURES]) {
        let mut s = T::zero();
        // Σ_i (w_i/u_M) e_i z_i, later mapped through 2Lᵀ
        let mut wz = [T::zero(); FEATURES];
        for i in 0..self.n_basis() {
            let b = self.basis_terms(i, phi);
            let c = self.weights[i] / self.u_max * b.e;
            s = s + c;
            for k in 0..FEATURES {
                wz[k] = wz[k] + c * b.z[k];
            }
        }
        let t = s.tanh();
        let du_ds = self.u_max * (T::one() - t * t);
        let two: T = lit(2.0);
        let grad = std::array::from_fn(|k| {
            let lt = (0..FEATURES).fold(T::zero(), |acc, r| acc + self.shape[r][k] * wz[r]);
            du_ds * two * lt
        });
        (self.u_max * t, grad)
    }

    /// Adds `adj · ∂u/∂θ` into `out` (flat [`to_flat`](Self::to_flat) layout).
    pub fn accumulate_param_grad(&self, phi: &[T; FEATURES], adj: T, out: &mut [T]) {
        let n = self.n_basis();
        assert_eq!(out.len(), self.n_params());
        let terms: Vec<BasisTerms<T>> = (0..n).map(|i| self.basis_terms(i, phi)).collect();
        let s = (0..n).fold(T::zero(), |acc, i| acc + self.weights[i] / self.u_max * terms[i].e);
        let t = s.tanh();
        let g = adj * self.u_max * (T::one() - t * t);
        let two: T = lit(2.0);
        let base_l = n * (1 + FEATURES);
        for (i, b) in terms.iter().enumerate() {
            out[i] = out[i] + g * b.e / self.u_max;
            let c = g * self.weights[i] / self.u_max * b.e;
            // ∂‖z‖²/∂a = 2Lᵀz, ∂‖z‖²/∂L = 2 z dᵀ, both entering through −exp.
            for k in 0..FEATURES {
                let lt = (0..FEATURES).fold(T::zero(), |acc, r| acc + self.shape[r][k] * b.z[r]);
                let idx = n + i * FEATURES + k;
                out[idx] = out[idx] - c * two * lt;
            }
            for r in 0..FEATURES {
                for k in 0..FEATURES {
                    let idx = base_l + r * FEATURES + k;
                    out[idx] = out[idx] - c * two * b.z[r] * b.d[k];
                }
            }
        }
    }
}

/// Policy parameters prepared for recording on a tape.
///
/// Holds the plain values plus the tape indices of the learnable leaves so
/// each evaluation becomes a single custom node.
pub struct RecordedPolicy {
    values: PolicyParams<f64>,
    leaves: Vec<Option<u32>>,
}

impl RecordedPolicy {
    pub fn new(params: &PolicyParams<Var<'_>>) -> Rc<Self> {
        Rc::new(Self {
            values: params.map(|v| v.val()),
            leaves: params.to_flat().iter().map(|v| v.index()).collect(),
        })
    }

    pub fn values(&self) -> &PolicyParams<f64> {
        &self.values
    }

    /// Records `π_θ(φ)` as one node: eager partials for the features, a
    /// deferred hook for the parameter block.
    pub fn eval<'t>(self: &Rc<Self>, tape: &'t Tape, phi: &[Var<'t>; FEATURES]) -> Var<'t> {
        let phi_val = phi.map(|v| v.val());
        let (u, dphi) = self.values.eval_with_feature_grad(&phi_val);
        let inputs: Vec<(Var<'t>, f64)> = phi.iter().copied().zip(dphi).collect();
        let hook = if self.leaves.iter().any(Option::is_some) {
            let me = Rc::clone(self);
            Some(Box::new(move |adj: f64, buf: &mut [f64]| {
                let mut local = vec![0.0; me.leaves.len()];
                me.values.accumulate_param_grad(&phi_val, adj, &mut local);
                for (leaf, g) in me.leaves.iter().zip(local) {
                    if let Some(idx) = leaf {
                        buf[*idx as usize] += g;
                    }
                }
            }) as crate::grad::Hook)
        } else {
            None
        };
        tape.custom(u, &inputs, hook)
    }
}

/// Initialization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyInit {
    pub n_basis: usize,
    pub u_max: f64,
    /// Center velocities are drawn from `[−velocity_range, velocity_range]`.
    pub velocity_range: f64,
}

impl Default for PolicyInit {
    fn default() -> Self {
        Self {
            n_basis: 200,
            u_max: 3.0,
            velocity_range: 2.0 * std::f64::consts::PI,
        }
    }
}

/// Random initial policy: `w ~ U(−u_M, u_M)`, centers uniform over the image
/// of `φ` with bounded velocities, `Σ_π = I`.
pub fn init_policy(seed: u64, cfg: &PolicyInit) -> PolicyParams<f64> {
    assert!(cfg.n_basis >= 1, "need at least one basis function");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi = std::f64::consts::PI;
    let weights = (0..cfg.n_basis)
        .map(|_| rng.random_range(-cfg.u_max..=cfg.u_max))
        .collect();
    let centers = (0..cfg.n_basis)
        .map(|_| {
            let v1 = rng.random_range(-cfg.velocity_range..=cfg.velocity_range);
            let v2 = rng.random_range(-cfg.velocity_range..=cfg.velocity_range);
            let a1: f64 = rng.random_range(-pi..=pi);
            let a2: f64 = rng.random_range(-pi..=pi);
            [v1, v2, a1.cos(), a2.cos(), a1.sin(), a2.sin()]
        })
        .collect();
    let mut p = PolicyParams::zeros(0, cfg.u_max);
    p.weights = weights;
    p.centers = centers;
    p
}

/// Parameters with inverted dropout applied to the weights.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub params: PolicyParams<f64>,
    /// Per-weight multiplier: `0` or `1/(1−rate)`.
    pub scale: Vec<f64>,
}

/// Masks each weight with probability `rate` and rescales survivors by
/// `1/(1−rate)`; centers and shape are untouched.
pub fn apply_dropout<R: Rng + ?Sized>(params: &PolicyParams<f64>, rate: f64, rng: &mut R) -> Dropout {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if rate == 0.0 {
        return Dropout {
            params: params.clone(),
            scale: vec![1.0; params.n_basis()],
        };
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..params.n_basis())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mut masked = params.clone();
    for (w, s) in masked.weights.iter_mut().zip(&scale) {
        *w *= s;
    }
    Dropout { params: masked, scale }
}

/// JSON checkpoint layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyCheckpoint {
    pub schema_version: u32,
    pub n_basis: usize,
    pub u_max: f64,
    pub weights: Vec<f64>,
    pub centers: Vec<[f64; FEATURES]>,
    /// `L`, row-major, 36 entries.
    pub shape_factor: Vec<f64>,
}

impl PolicyCheckpoint {
    pub const SCHEMA_VERSION: u32 = 1;
}

impl From<&PolicyParams<f64>> for PolicyCheckpoint {
    fn from(p: &PolicyParams<f64>) -> Self {
        Self {
            schema_version: Self::SCHEMA_VERSION,
            n_basis: p.n_basis(),
            u_max: p.u_max,
            weights: p.weights.clone(),
            centers: p.centers.clone(),
            shape_factor: p.shape.iter().flatten().copied().collect(),
        }
    }
}

impl TryFrom<PolicyCheckpoint> for PolicyParams<f64> {
    type Error = PolicyError;
    fn try_from(c: PolicyCheckpoint) -> Result<Self, PolicyError> {
        if c.schema_version != PolicyCheckpoint::SCHEMA_VERSION {
            return Err(PolicyError::Schema(c.schema_version));
        }
        if c.weights.len() != c.n_basis || c.centers.len() != c.n_basis {
            return Err(PolicyError::Malformed(format!(
                "n_basis {} but {} weights and {} centers",
                c.n_basis,
                c.weights.len(),
                c.centers.len()
            )));
        }
        if c.shape_factor.len() != FEATURES * FEATURES {
            return Err(PolicyError::Malformed(format!(
                "shape factor has {} entries",
                c.shape_factor.len()
            )));
        }
        if !(c.u_max > 0.0) {
            return Err(PolicyError::Malformed("u_max must be positive".into()));
        }
        let mut shape = [[0.0; FEATURES]; FEATURES];
        for (r, row) in shape.iter_mut().enumerate() {
            row.copy_from_slice(&c.shape_factor[r * FEATURES..(r + 1) * FEATURES]);
        }
        Ok(Self {
            weights: c.weights,
            centers: c.centers,
            shape,
            u_max: c.u_max,
        })
    }
}

impl PolicyParams<f64> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PolicyCheckpoint::from(self)).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PolicyError> {
        serde_json::from_str::<PolicyCheckpoint>(s)?.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        crate::io::write_atomic(path, self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
