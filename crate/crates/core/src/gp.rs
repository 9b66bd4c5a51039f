//! Gaussian-process model of the one-step velocity change.
//!
//! Each joint's velocity change over one sampling period,
//! `Δ⁽ⁱ⁾ = q̇⁽ⁱ⁾ₜ₊₁ − q̇⁽ⁱ⁾ₜ`, is an independent GP over the input
//! `x̃ = [q1, q2, q̇1, q̇2, u]` with a squared-exponential kernel. The nominal
//! rigid-body dynamics, integrated over one period, serve as the prior mean:
//! `m_Δ(x̃) = T_s · M(q)⁻¹ (B u − n(q, q̇))`. Positions follow from the
//! velocity change by
//!
//! ```text
//! q̇ₜ₊₁ = q̇ₜ + Δ
//! qₜ₊₁ = qₜ + T_s q̇ₜ + (T_s / 2) Δ
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{forward_dynamics, JointState, PlantParams};
use crate::grad::Var;
use crate::linalg::{dot, Cholesky, LinalgError, Mat};
use crate::scalar::{lit, Real};

pub const GP_INPUT: usize = 5;

/// `[q1, q2, q̇1, q̇2, u]`.
pub type GpInput<T> = [T; GP_INPUT];

pub const NOISE_FLOOR: f64 = 1e-8;
pub const MAX_JITTER: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("kernel hyperparameter `{0}` must be strictly positive and finite")]
    Hyperparameter(&'static str),
    #[error("sampling time must be positive")]
    SamplingTime,
    #[error("dataset has {inputs} inputs but {targets} targets")]
    Mismatch { inputs: usize, targets: usize },
    #[error("Gram matrix factorization failed for joint {dof}: {source}")]
    Factorization { dof: usize, source: LinalgError },
    #[error("need at least {need} data points, have {have}")]
    TooFewPoints { need: usize, have: usize },
    #[error("dataset csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("hyperparameter json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported hyperparameter schema version {0}")]
    Schema(u32),
}

pub fn gp_input<T: Real>(state: &JointState<T>, u: T) -> GpInput<T> {
    [state.q[0], state.q[1], state.qd[0], state.qd[1], u]
}

/// Training data: inputs and the raw observed velocity changes.
#[derive(Debug, Clone, PartialEq)]
pub struct GpDataset<T> {
    pub inputs: Vec<GpInput<T>>,
    /// Observed `[Δ⁽¹⁾, Δ⁽²⁾]` (not residuals: the prior mean is subtracted at solve time).
    pub targets: Vec<[T; 2]>,
    pub ts: T,
}

impl<T: Real> GpDataset<T> {
    pub fn new(ts: T) -> Self {
        assert!(ts > T::zero(), "sampling time must be positive");
        Self {
            inputs: Vec::new(),
            targets: Vec::new(),
            ts,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, input: GpInput<T>, target: [T; 2]) {
        self.inputs.push(input);
        self.targets.push(target);
    }

    pub fn extend(&mut self, other: &GpDataset<T>) {
        self.inputs.extend_from_slice(&other.inputs);
        self.targets.extend_from_slice(&other.targets);
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.ts > T::zero()) {
            return Err(GpError::SamplingTime);
        }
        if self.inputs.len() != self.targets.len() {
            return Err(GpError::Mismatch {
                inputs: self.inputs.len(),
                targets: self.targets.len(),
            });
        }
        Ok(())
    }

    /// Keeps the `max_n` most recent points (identity if already small enough).
    pub fn subset_of_data(&self, max_n: usize) -> Self {
        assert!(max_n >= 1, "subset size must be at least one");
        if self.len() <= max_n {
            return self.clone();
        }
        let start = self.len() - max_n;
        Self {
            inputs: self.inputs[start..].to_vec(),
            targets: self.targets[start..].to_vec(),
            ts: self.ts,
        }
    }

    /// Residual targets `y − m_Δ(X̃)` for one joint.
    pub fn residuals(&self, plant: &PlantParams<T>, dof: usize) -> Vec<T> {
        self.inputs
            .iter()
            .zip(&self.targets)
            .map(|(x, y)| y[dof] - prior_mean(x, plant, self.ts)[dof])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> GpDataset<U> {
        GpDataset {
            inputs: self.inputs.iter().map(|x| x.map(|v| lit(v.value()))).collect(),
            targets: self.targets.iter().map(|y| y.map(|v| lit(v.value()))).collect(),
            ts: lit(self.ts.value()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRow {
    q1: f64,
    q2: f64,
    qd1: f64,
    qd2: f64,
    u: f64,
    dv1: f64,
    dv2: f64,
}

impl GpDataset<f64> {
    /// CSV with header `q1,q2,qd1,qd2,u,dv1,dv2`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), GpError> {
        let mut wr = csv::Writer::from_writer(w);
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            wr.serialize(DatasetRow {
                q1: x[0],
                q2: x[1],
                qd1: x[2],
                qd2: x[3],
                u: x[4],
                dv1: y[0],
                dv2: y[1],
            })?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, ts: f64) -> Result<Self, GpError> {
        let mut data = Self::new(ts);
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: DatasetRow = row?;
            data.push([row.q1, row.q2, row.qd1, row.qd2, row.u], [row.dv1, row.dv2]);
        }
        Ok(data)
    }
}

/// Squared-exponential kernel hyperparameters for one joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyp<T> {
    pub lengthscales: [T; GP_INPUT],
    pub signal_var: T,
    pub noise_var: T,
}

impl<T: Real> KernelHyp<T> {
    pub fn unit() -> Self {
        Self {
            lengthscales: [T::one(); GP_INPUT],
            signal_var: T::one(),
            noise_var: lit(1e-4),
        }
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let ok = |x: T| x > T::zero() && x.is_finite();
        if !self.lengthscales.iter().all(|&l| ok(l)) {
            return Err(GpError::Hyperparameter("lengthscale"));
        }
        if !ok(self.signal_var) {
            return Err(GpError::Hyperparameter("signal_var"));
        }
        if !ok(self.noise_var) {
            return Err(GpError::Hyperparameter("noise_var"));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> KernelHyp<U> {
        KernelHyp {
            lengthscales: self.lengthscales.map(|v| lit(v.value())),
            signal_var: lit(self.signal_var.value()),
            noise_var: lit(self.noise_var.value()),
        }
    }
}

/// `σ_f² · exp(−½ Σ_d (a_d − b_d)² / ℓ_d²)`.
pub fn se_kernel<T: Real>(a: &GpInput<T>, b: &GpInput<T>, hyp: &KernelHyp<T>) -> T {
    let mut r2 = T::zero();
    for d in 0..GP_INPUT {
        let z = (a[d] - b[d]) / hyp.lengthscales[d];
        r2 = r2 + z * z;
    }
    hyp.signal_var * (-lit::<T>(0.5) * r2).exp()
}

/// Prior mean of the velocity change: one period of nominal acceleration.
pub fn prior_mean<T: Real>(x: &GpInput<T>, plant: &PlantParams<T>, ts: T) -> [T; 2] {
    let state = JointState::new([x[0], x[1]], [x[2], x[3]]);
    let qdd = forward_dynamics(&state, x[4], plant);
    [ts * qdd[0], ts * qdd[1]]
}

/// Hyperparameters of both joints, as persisted to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperFile {
    pub schema_version: u32,
    pub ts: f64,
    pub n_points: usize,
    pub dofs: [KernelHyp<f64>; 2],
}

impl HyperFile {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hyperparameters serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, GpError> {
        let f: Self = serde_json::from_str(s)?;
        if f.schema_version != Self::SCHEMA_VERSION {
            return Err(GpError::Schema(f.schema_version));
        }
        Ok(f)
    }
}

/// Per-joint factorization of `Γ = K + σ²I` and the residual weights `Γ⁻¹ r`.
#[derive(Debug, Clone)]
struct DofSolve<T> {
    hyp: KernelHyp<T>,
    /// Training inputs divided by the lengthscales, `n × 5` row-major.
    scaled: Vec<T>,
    inv_ls: [T; GP_INPUT],
    chol: Option<Cholesky<T>>,
    alpha: Vec<T>,
}

impl<T: Real> DofSolve<T> {
    fn kernel_row(&self, x: &GpInput<T>) -> (Vec<T>, [T; GP_INPUT]) {
        let xs: [T; GP_INPUT] = std::array::from_fn(|d| x[d] * self.inv_ls[d]);
        let half: T = lit(0.5);
        let k = self
            .scaled
            .chunks_exact(GP_INPUT)
            .map(|row| {
                let mut r2 = T::zero();
                for d in 0..GP_INPUT {
                    let z = xs[d] - row[d];
                    r2 = r2 + z * z;
                }
                self.hyp.signal_var * (-half * r2).exp()
            })
            .collect();
        (k, xs)
    }
}

/// Residual posterior for both joints at one input, with optional input
/// Jacobians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualPosterior<T> {
    /// `K_{x̃X̃} Γ⁻¹ (y − m(X̃))`
    pub mean: [T; 2],
    /// Posterior variance, clamped at zero.
    pub var: [T; 2],
    pub clamped: [bool; 2],
    pub dmean: [[T; GP_INPUT]; 2],
    pub dvar: [[T; GP_INPUT]; 2],
}

/// Posterior mean and variance of the velocity change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior<T> {
    pub mean: [T; 2],
    pub var: [T; 2],
    /// Set when a (slightly) negative variance was clamped to zero.
    pub clamped: [bool; 2],
}

/// Gaussian over the next joint state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatePrediction<T> {
    pub mean: JointState<T>,
    /// Covariance in `[q1, q2, q̇1, q̇2]` order.
    pub cov: [[T; 4]; 4],
}

/// GP dynamics model. Immutable: the factorization always matches the data
/// and hyperparameters it was built from.
#[derive(Debug, Clone)]
pub struct GpModel<T> {
    data: GpDataset<T>,
    plant: PlantParams<T>,
    dofs: [DofSolve<T>; 2],
    jitter: [T; 2],
}

impl<T: Real> GpModel<T> {
    pub fn new(data: GpDataset<T>, hyp: [KernelHyp<T>; 2], plant: PlantParams<T>) -> Result<Self, GpError> {
        data.validate()?;
        let n = data.len();
        let mut jitter = [T::zero(); 2];
        let build = |dof: usize, hyp: KernelHyp<T>, jitter: &mut T| -> Result<DofSolve<T>, GpError> {
            hyp.validate()?;
            let mut hyp = hyp;
            hyp.noise_var = hyp.noise_var.max(lit(NOISE_FLOOR));
            let inv_ls = hyp.lengthscales.map(|l| T::one() / l);
            let scaled: Vec<T> = data
                .inputs
                .iter()
                .flat_map(|x| (0..GP_INPUT).map(move |d| x[d] * inv_ls[d]))
                .collect();
            if n == 0 {
                return Ok(DofSolve {
                    hyp,
                    scaled,
                    inv_ls,
                    chol: None,
                    alpha: Vec::new(),
                });
            }
            let gram = Mat::from_fn(n, n, |i, j| {
                let k = se_kernel(&data.inputs[i], &data.inputs[j], &hyp);
                if i == j {
                    k + hyp.noise_var
                } else {
                    k
                }
            });
            let (chol, used) = Cholesky::with_jitter(&gram, lit(1e-10), lit(MAX_JITTER))
                .map_err(|source| GpError::Factorization { dof, source })?;
            *jitter = used;
            let alpha = chol.solve(&data.residuals(&plant, dof));
            Ok(DofSolve {
                hyp,
                scaled,
                inv_ls,
                chol: Some(chol),
                alpha,
            })
        };
        let d0 = build(0, hyp[0], &mut jitter[0])?;
        let d1 = build(1, hyp[1], &mut jitter[1])?;
        Ok(Self {
            data,
            plant,
            dofs: [d0, d1],
            jitter,
        })
    }

    /// Model with no data: predictions equal the prior mean.
    pub fn prior_only(plant: PlantParams<T>, ts: T, hyp: [KernelHyp<T>; 2]) -> Result<Self, GpError> {
        Self::new(GpDataset::new(ts), hyp, plant)
    }

    pub fn dataset(&self) -> &GpDataset<T> {
        &self.data
    }

    pub fn plant(&self) -> &PlantParams<T> {
        &self.plant
    }

    pub fn ts(&self) -> T {
        self.data.ts
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn hyperparameters(&self) -> [KernelHyp<T>; 2] {
        [self.dofs[0].hyp, self.dofs[1].hyp]
    }

    /// Jitter added to each Gram matrix diagonal to make it factorizable.
    pub fn jitter(&self) -> [T; 2] {
        self.jitter
    }

    pub fn hyper_file(&self) -> HyperFile {
        HyperFile {
            schema_version: HyperFile::SCHEMA_VERSION,
            ts: self.ts().value(),
            n_points: self.len(),
            dofs: self.hyperparameters().map(|h| h.cast()),
        }
    }

    /// Kernel part of the posterior at `x`; Jacobians are filled when `grad`.
    pub fn residual_posterior(&self, x: &GpInput<T>, grad: bool) -> ResidualPosterior<T> {
        let mut out = ResidualPosterior {
            mean: [T::zero(); 2],
            var: [T::zero(); 2],
            clamped: [false; 2],
            dmean: [[T::zero(); GP_INPUT]; 2],
            dvar: [[T::zero(); GP_INPUT]; 2],
        };
        for (i, dof) in self.dofs.iter().enumerate() {
            let chol = match &dof.chol {
                Some(c) => c,
                None => {
                    out.var[i] = dof.hyp.signal_var;
                    continue;
                }
            };
            let (k, xs) = dof.kernel_row(x);
            out.mean[i] = dot(&k, &dof.alpha);
            let v = chol.solve_lower(&k);
            let raw = dof.hyp.signal_var - dot(&v, &v);
            if raw < T::zero() {
                out.clamped[i] = true;
                out.var[i] = T::zero();
            } else {
                out.var[i] = raw;
            }
            if grad {
                // ∂k_j/∂x_d = −k_j (xs_d − Xs_jd) / ℓ_d
                let beta = if out.clamped[i] { None } else { Some(chol.solve_upper(&v)) };
                for (j, row) in dof.scaled.chunks_exact(GP_INPUT).enumerate() {
                    let ka = k[j] * dof.alpha[j];
                    let kb = beta.as_ref().map(|b| k[j] * b[j]);
                    for d in 0..GP_INPUT {
                        let diff = (xs[d] - row[d]) * dof.inv_ls[d];
                        out.dmean[i][d] = out.dmean[i][d] - ka * diff;
                        if let Some(kb) = kb {
                            // var = s − kᵀΓ⁻¹k, ∂var = −2 βᵀ ∂k
                            out.dvar[i][d] = out.dvar[i][d] + lit::<T>(2.0) * kb * diff;
                        }
                    }
                }
            }
        }
        out
    }

    /// Posterior of the velocity change `Δ` at `x`.
    pub fn posterior(&self, x: &GpInput<T>) -> Posterior<T> {
        let r = self.residual_posterior(x, false);
        let m = prior_mean(x, &self.plant, self.ts());
        Posterior {
            mean: [m[0] + r.mean[0], m[1] + r.mean[1]],
            var: r.var,
            clamped: r.clamped,
        }
    }

    /// Gaussian over the next state under the speed-integration model.
    pub fn one_step_predict(&self, state: &JointState<T>, u: T) -> StatePrediction<T> {
        let post = self.posterior(&gp_input(state, u));
        let ts = self.ts();
        let half_ts = ts * lit(0.5);
        let mean = integrate_velocity_change(state, post.mean, ts);
        let mut cov = [[T::zero(); 4]; 4];
        for i in 0..2 {
            let v = post.var[i];
            cov[i][i] = half_ts * half_ts * v;
            cov[i][i + 2] = half_ts * v;
            cov[i + 2][i] = half_ts * v;
            cov[i + 2][i + 2] = v;
        }
        StatePrediction { mean, cov }
    }

    /// Reparameterized draw of the next state for externally supplied
    /// standard-normal `noise`: `Δ = μ + √var ⊙ noise`.
    ///
    /// Generic over the scalar so the same map can be recorded for gradients.
    pub fn sample_next_state<S>(&self, state: &JointState<S>, u: S, noise: [f64; 2]) -> JointState<S>
    where
        S: ModelScalar<Base = T>,
    {
        let x = gp_input(state, u);
        let ts: S = lit(self.ts().value());
        let plant = self.plant.cast::<S>();
        let prior = prior_mean(&x, &plant, ts);
        let (res_mean, res_var) = S::gp_residual(self, &x);
        let delta: [S; 2] = std::array::from_fn(|i| {
            let sd = if res_var[i].value() > 0.0 {
                res_var[i].sqrt()
            } else {
                S::zero()
            };
            prior[i] + res_mean[i] + sd * lit(noise[i])
        });
        integrate_velocity_change(state, delta, ts)
    }
}

/// Speed-integration update: `q̇' = q̇ + Δ`, `q' = q + T_s q̇ + (T_s/2) Δ`.
pub fn integrate_velocity_change<T: Real>(state: &JointState<T>, delta: [T; 2], ts: T) -> JointState<T> {
    let half_ts = ts * lit(0.5);
    JointState::new(
        [
            state.q[0] + ts * state.qd[0] + half_ts * delta[0],
            state.q[1] + ts * state.qd[1] + half_ts * delta[1],
        ],
        [state.qd[0] + delta[0], state.qd[1] + delta[1]],
    )
}

/// Scalars that can evaluate the GP residual posterior of a [`GpModel`].
///
/// Plain floats evaluate it directly; [`Var`] records it as one custom node
/// per output with analytic input Jacobians.
pub trait ModelScalar: Real {
    type Base: Real;
    fn gp_residual(model: &GpModel<Self::Base>, x: &GpInput<Self>) -> ([Self; 2], [Self; 2]);
}

impl ModelScalar for f64 {
    type Base = f64;
    fn gp_residual(model: &GpModel<f64>, x: &GpInput<f64>) -> ([f64; 2], [f64; 2]) {
        let r = model.residual_posterior(x, false);
        (r.mean, r.var)
    }
}

impl ModelScalar for f32 {
    type Base = f32;
    fn gp_residual(model: &GpModel<f32>, x: &GpInput<f32>) -> ([f32; 2], [f32; 2]) {
        let r = model.residual_posterior(x, false);
        (r.mean, r.var)
    }
}

impl<'t> ModelScalar for Var<'t> {
    type Base = f64;
    fn gp_residual(model: &GpModel<f64>, x: &GpInput<Self>) -> ([Self; 2], [Self; 2]) {
        let xv = x.map(|v| v.val());
        let tape = match x.iter().find_map(|v| v.tape()) {
            Some(t) => t,
            None => {
                let r = model.residual_posterior(&xv, false);
                return (r.mean.map(Var::constant), r.var.map(Var::constant));
            }
        };
        let r = model.residual_posterior(&xv, true);
        let node = |value: f64, partials: &[f64; GP_INPUT]| -> Var<'t> {
            let inputs: [(Var<'t>, f64); GP_INPUT] = std::array::from_fn(|d| (x[d], partials[d]));
            tape.custom(value, &inputs, None)
        };
        (
            [node(r.mean[0], &r.dmean[0]), node(r.mean[1], &r.dmean[1])],
            [node(r.var[0], &r.dvar[0]), node(r.var[1], &r.dvar[1])],
        )
    }
}

/// Settings for marginal-likelihood hyperparameter fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub learning_rate: f64,
    /// Stop when the log marginal likelihood improves by less than this
    /// (relative) over `patience` iterations.
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            learning_rate: 0.05,
            tolerance: 1e-6,
            patience: 25,
        }
    }
}

/// Result of [`fit_hyperparameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T> {
    pub hyp: [KernelHyp<T>; 2],
    pub log_ml: [T; 2],
    /// False when the iteration cap was hit; the best iterate is still returned.
    pub converged: [bool; 2],
}

/// Minimum number of points accepted by [`fit_hyperparameters`].
pub const MIN_FIT_POINTS: usize = 10;

const LOG_BOUNDS_LS: (f64, f64) = (-6.9, 6.9);
const LOG_BOUNDS_SF: (f64, f64) = (-27.0, 13.8);

/// Log marginal likelihood of residuals `r` and its gradient with respect to
/// `[log ℓ₁..log ℓ₅, log σ_f², log σ_n²]`.
pub fn log_marginal_likelihood<T: Real>(
    inputs: &[GpInput<T>],
    r: &[T],
    hyp: &KernelHyp<T>,
) -> Result<(T, [T; GP_INPUT + 2]), LinalgError> {
    let n = inputs.len();
    let noise = hyp.noise_var.max(lit(NOISE_FLOOR));
    let k = Mat::from_fn(n, n, |i, j| se_kernel(&inputs[i], &inputs[j], hyp));
    let mut gram = k.clone();
    for i in 0..n {
        gram[(i, i)] = gram[(i, i)] + noise;
    }
    let (chol, _) = Cholesky::with_jitter(&gram, lit(1e-10), lit(MAX_JITTER))?;
    let alpha = chol.solve(r);
    let two_pi: T = lit(2.0 * std::f64::consts::PI);
    let half: T = lit(0.5);
    let lml = -half * dot(r, &alpha) - half * chol.log_det() - half * lit::<T>(n as f64) * two_pi.ln();
    let inv = chol.inverse();
    let mut grad = [T::zero(); GP_INPUT + 2];
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - inv[(i, j)];
            let kij = k[(i, j)];
            for d in 0..GP_INPUT {
                let z = (inputs[i][d] - inputs[j][d]) / hyp.lengthscales[d];
                grad[d] = grad[d] + w * kij * z * z;
            }
            grad[GP_INPUT] = grad[GP_INPUT] + w * kij;
        }
        grad[GP_INPUT + 1] = grad[GP_INPUT + 1] + (alpha[i] * alpha[i] - inv[(i, i)]) * noise;
    }
    for g in grad.iter_mut() {
        *g = *g * half;
    }
    Ok((lml, grad))
}

fn variance<T: Real>(xs: impl Iterator<Item = T> + Clone) -> T {
    let n = lit::<T>(xs.clone().count().max(1) as f64);
    let mean = xs.clone().fold(T::zero(), |a, x| a + x) / n;
    xs.fold(T::zero(), |a, x| a + (x - mean) * (x - mean)) / n
}

fn fit_one<T: Real>(inputs: &[GpInput<T>], r: &[T], init: KernelHyp<T>, cfg: &FitConfig) -> (KernelHyp<T>, T, bool) {
    let to_theta = |h: &KernelHyp<T>| -> [f64; GP_INPUT + 2] {
        let mut t = [0.0; GP_INPUT + 2];
        for d in 0..GP_INPUT {
            t[d] = h.lengthscales[d].value().ln();
        }
        t[GP_INPUT] = h.signal_var.value().ln();
        t[GP_INPUT + 1] = h.noise_var.value().max(NOISE_FLOOR).ln();
        t
    };
    let from_theta = |t: &[f64; GP_INPUT + 2]| -> KernelHyp<T> {
        KernelHyp {
            lengthscales: std::array::from_fn(|d| lit(t[d].exp())),
            signal_var: lit(t[GP_INPUT].exp()),
            noise_var: lit(t[GP_INPUT + 1].exp()),
        }
    };
    let clamp = |t: &mut [f64; GP_INPUT + 2]| {
        for v in t.iter_mut().take(GP_INPUT) {
            *v = v.clamp(LOG_BOUNDS_LS.0, LOG_BOUNDS_LS.1);
        }
        t[GP_INPUT] = t[GP_INPUT].clamp(LOG_BOUNDS_SF.0, LOG_BOUNDS_SF.1);
        t[GP_INPUT + 1] = t[GP_INPUT + 1].clamp(NOISE_FLOOR.ln(), LOG_BOUNDS_SF.1);
    };
    let mut theta = to_theta(&init);
    clamp(&mut theta);
    let mut adam = crate::optim::Adam::new(theta.len(), cfg.learning_rate);
    let mut best = (from_theta(&theta), T::neg_infinity());
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let hyp = from_theta(&theta);
        let (lml, grad) = match log_marginal_likelihood(inputs, r, &hyp) {
            Ok(v) => v,
            Err(_) => break,
        };
        if !lml.is_finite() {
            break;
        }
        if lml > best.1 {
            best = (hyp, lml);
        }
        history.push(lml.value());
        if history.len() > cfg.patience {
            let old = history[history.len() - 1 - cfg.patience];
            let now = best.1.value();
            if now - old <= cfg.tolerance * (1.0 + old.abs()) {
                converged = true;
                break;
            }
        }
        // ascend: minimize −LML
        let neg: Vec<f64> = grad.iter().map(|g| -g.value()).collect();
        adam.step(&mut theta, &neg);
        clamp(&mut theta);
    }
    (best.0, best.1, converged)
}

/// Maximizes the log marginal likelihood of the residual targets for each
/// joint, in log-parameter space, from two initializations (unit and
/// data-scaled lengthscales). Returns the better optimum per joint.
pub fn fit_hyperparameters<T: Real>(
    data: &GpDataset<T>,
    plant: &PlantParams<T>,
    cfg: &FitConfig,
) -> Result<FitResult<T>, GpError> {
    data.validate()?;
    if data.len() < MIN_FIT_POINTS {
        return Err(GpError::TooFewPoints {
            need: MIN_FIT_POINTS,
            have: data.len(),
        });
    }
    let floor: T = lit(1e-6);
    let data_scaled: [T; GP_INPUT] = std::array::from_fn(|d| {
        variance(data.inputs.iter().map(|x| x[d])).sqrt().max(lit(1e-3))
    });
    let mut out = FitResult {
        hyp: [KernelHyp::unit(); 2],
        log_ml: [T::neg_infinity(); 2],
        converged: [false; 2],
    };
    for dof in 0..2 {
        let r = data.residuals(plant, dof);
        let sf = variance(r.iter().copied()).max(floor);
        let inits = [
            KernelHyp {
                lengthscales: [T::one(); GP_INPUT],
                signal_var: sf,
                noise_var: sf * lit(1e-2),
            },
            KernelHyp {
                lengthscales: data_scaled,
                signal_var: sf,
                noise_var: sf * lit(1e-2),
            },
        ];
        for init in inits {
            let (hyp, lml, conv) = fit_one(&data.inputs, &r, init, cfg);
            if lml > out.log_ml[dof] || out.log_ml[dof] == T::neg_infinity() {
                out.hyp[dof] = hyp;
                out.log_ml[dof] = lml;
                out.converged[dof] = conv;
            }
        }
        if !out.converged[dof] {
            log::warn!("hyperparameter fit for joint {} hit the iteration cap", dof + 1);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Variant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plant() -> PlantParams<f64> {
        PlantParams::default_for(Variant::Pendubot)
    }

    fn random_dataset(n: usize, seed: u64) -> GpDataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = GpDataset::new(0.02);
        for _ in 0..n {
            let x: GpInput<f64> = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let m = prior_mean(&x, &plant(), 0.02);
            d.push(x, [m[0] + 0.1 * x[0].sin(), m[1] - 0.05 * x[2]]);
        }
        d
    }

    #[test]
    fn kernel_basics() {
        let h = KernelHyp { lengthscales: [0.5, 1.0, 2.0, 1.5, 0.7], signal_var: 2.5, noise_var: 1e-3 };
        let a = [0.1, 0.2, 0.3, 0.4, 0.5];
        let b = [-0.3, 0.0, 1.2, 0.4, -0.5];
        assert_eq!(se_kernel(&a, &a, &h), 2.5);
        assert_eq!(se_kernel(&a, &b, &h), se_kernel(&b, &a, &h));
    }

    #[test]
    fn empty_model_recovers_prior() {
        let hyp = [KernelHyp::unit(); 2];
        let m = GpModel::prior_only(plant(), 0.02, hyp).unwrap();
        let x = [0.3, -0.4, 1.0, 2.0, 0.5];
        let p = m.posterior(&x);
        assert_eq!(p.mean, prior_mean(&x, &plant(), 0.02));
        assert_eq!(p.var, [1.0, 1.0]);
    }

    #[test]
    fn prior_mean_is_scaled_forward_dynamics() {
        let x = [0.3, -1.1, 0.7, -2.0, 1.3];
        let m = prior_mean(&x, &plant(), 0.02);
        let qdd = forward_dynamics(&JointState::new([0.3, -1.1], [0.7, -2.0]), 1.3, &plant());
        assert_eq!(m, [0.02 * qdd[0], 0.02 * qdd[1]]);
        assert_eq!(prior_mean(&[0.0; 5], &plant(), 0.02), [0.0, 0.0]);
    }

    #[test]
    fn interpolation_limit() {
        let data = random_dataset(15, 2);
        let h = KernelHyp { lengthscales: [1.0; 5], signal_var: 1.0, noise_var: 1e-12 };
        let m = GpModel::new(data.clone(), [h; 2], plant()).unwrap();
        let p = m.posterior(&data.inputs[4]);
        for i in 0..2 {
            assert!((p.mean[i] - data.targets[4][i]).abs() < 1e-5, "{:?}", p.mean);
            assert!(p.var[i] < 1e-5);
        }
    }

    #[test]
    fn subset_rule_keeps_most_recent() {
        let data = random_dataset(50, 3);
        assert_eq!(data.subset_of_data(100), data);
        let s = data.subset_of_data(20);
        assert_eq!(s.len(), 20);
        assert_eq!(s.inputs[..], data.inputs[30..]);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let data = random_dataset(5, 4);
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("q1,q2,qd1,qd2,u,dv1,dv2\n"));
        assert_eq!(GpDataset::read_csv(&buf[..], 0.02).unwrap(), data);
        let m = GpModel::new(data, [KernelHyp::unit(); 2], plant()).unwrap();
        let f = m.hyper_file();
        assert_eq!(HyperFile::from_json(&f.to_json()).unwrap(), f);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let data = random_dataset(25, 5);
        let r = data.residuals(&plant(), 0);
        let h = KernelHyp { lengthscales: [0.8, 1.3, 2.0, 0.9, 1.1], signal_var: 0.02, noise_var: 1e-3 };
        let (_, g) = log_marginal_likelihood(&data.inputs, &r, &h).unwrap();
        let eps = 1e-6;
        for p in 0..7 {
            let bump = |s: f64| {
                let mut h2 = h;
                let f = (s * eps).exp();
                match p {
                    0..=4 => h2.lengthscales[p] *= f,
                    5 => h2.signal_var *= f,
                    _ => h2.noise_var *= f,
                }
                log_marginal_likelihood(&data.inputs, &r, &h2).unwrap().0
            };
            let fd = (bump(1.0) - bump(-1.0)) / (2.0 * eps);
            assert!((fd - g[p]).abs() < 1e-4 * (1.0 + fd.abs()), "param {p}: {fd} vs {}", g[p]);
        }
    }

    #[test]
    fn residual_jacobians_match_finite_differences() {
        let data = random_dataset(30, 6);
        let h = KernelHyp { lengthscales: [0.9, 1.2, 1.5, 1.1, 2.0], signal_var: 0.05, noise_var: 1e-3 };
        let m = GpModel::new(data, [h; 2], plant()).unwrap();
        let x = [0.2, -0.3, 0.5, 0.1, -0.4];
        let r = m.residual_posterior(&x, true);
        let eps = 1e-6;
        for d in 0..5 {
            let mut xp = x;
            xp[d] += eps;
            let mut xm = x;
            xm[d] -= eps;
            let (p, q) = (m.residual_posterior(&xp, false), m.residual_posterior(&xm, false));
            for i in 0..2 {
                let fm = (p.mean[i] - q.mean[i]) / (2.0 * eps);
                let fv = (p.var[i] - q.var[i]) / (2.0 * eps);
                assert!((fm - r.dmean[i][d]).abs() < 1e-7, "mean {i} {d}");
                assert!((fv - r.dvar[i][d]).abs() < 1e-7, "var {i} {d}");
            }
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let data = random_dataset(5, 1);
        assert!(matches!(
            fit_hyperparameters(&data, &plant(), &FitConfig::default()),
            Err(GpError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn zero_noise_request_is_floored() {
        let data = random_dataset(10, 1);
        let mut h = KernelHyp::unit();
        h.noise_var = 1e-20;
        let m = GpModel::new(data, [h; 2], plant()).unwrap();
        assert_eq!(m.hyperparameters()[0].noise_var, NOISE_FLOOR);
    }
}
