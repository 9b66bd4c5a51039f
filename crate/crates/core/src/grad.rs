//! Reverse-mode differentiation over a recorded trace.
//!
//! A [`Tape`] records every operation performed on tape-backed [`Var`]s as a
//! node holding its local partial derivatives. [`Tape::gradient`] sweeps the
//! trace backwards once to produce the gradient of a scalar output with
//! respect to any set of leaves.
//!
//! [`Var`] implements [`num_traits::Float`], so any code generic over
//! [`Real`](crate::Real) can be recorded unchanged. Operations whose
//! derivative the engine does not provide (inverse trigonometry, `atan2`,
//! `cbrt`, ...) poison the tape; the error is reported with the primitive's
//! name when the gradient is requested.
//!
//! Expensive composite operations (the GP posterior, the RBF policy) are
//! recorded as single custom nodes via [`Tape::custom`], with eager partials
//! for small inputs and an optional deferred hook for large parameter blocks.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::num::FpCategory;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};

use num_traits::{Float, FloatConst, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::policy::PolicyParams;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("primitive `{0}` is not supported by the differentiation engine")]
    UnsupportedPrimitive(&'static str),
    #[error("variable does not belong to this tape")]
    ForeignVariable,
}

/// Deferred vector-Jacobian product: receives the node's adjoint and the
/// adjoint buffer of the whole trace.
pub type Hook = Box<dyn Fn(f64, &mut [f64])>;

#[derive(Default)]
struct Trace {
    /// `ends[i]` is one past the last edge of node `i`.
    ends: Vec<u32>,
    edge_parent: Vec<u32>,
    edge_partial: Vec<f64>,
    hooks: Vec<(u32, Hook)>,
    unsupported: Option<&'static str>,
}

impl Trace {
    fn push(&mut self, edges: &[(u32, f64)]) -> u32 {
        for &(p, d) in edges {
            self.edge_parent.push(p);
            self.edge_partial.push(d);
        }
        let idx = self.ends.len() as u32;
        self.ends.push(self.edge_parent.len() as u32);
        idx
    }
}

/// Node and edge counts of a recorded trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TapeStats {
    pub nodes: usize,
    pub edges: usize,
    pub hooks: usize,
    pub approx_bytes: usize,
}

/// Recording of a computation. Single-threaded; use one tape per thread.
#[derive(Default)]
pub struct Tape {
    trace: RefCell<Trace>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A new independent variable (leaf).
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.trace.borrow_mut().push(&[]);
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    /// Records a custom node with value `value`, local partials with respect
    /// to `inputs`, and an optional deferred hook.
    pub fn custom<'t>(&'t self, value: f64, inputs: &[(Var<'t>, f64)], hook: Option<Hook>) -> Var<'t> {
        let mut edges = Vec::with_capacity(inputs.len());
        for (v, d) in inputs {
            if let Some(t) = v.tape {
                debug_assert!(std::ptr::eq(t, self), "variable from another tape");
                edges.push((v.idx, *d));
            }
        }
        if edges.is_empty() && hook.is_none() {
            return Var::constant(value);
        }
        let mut trace = self.trace.borrow_mut();
        let idx = trace.push(&edges);
        if let Some(h) = hook {
            trace.hooks.push((idx, h));
        }
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn len(&self) -> usize {
        self.trace.borrow().ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> TapeStats {
        let t = self.trace.borrow();
        TapeStats {
            nodes: t.ends.len(),
            edges: t.edge_parent.len(),
            hooks: t.hooks.len(),
            approx_bytes: t.ends.len() * 4 + t.edge_parent.len() * 12 + t.hooks.len() * 24,
        }
    }

    /// First unsupported primitive encountered while recording, if any.
    pub fn unsupported(&self) -> Option<&'static str> {
        self.trace.borrow().unsupported
    }

    fn poison(&self, name: &'static str) {
        let mut t = self.trace.borrow_mut();
        if t.unsupported.is_none() {
            t.unsupported = Some(name);
        }
    }

    /// Gradient of `output` with respect to each of `wrt`.
    pub fn gradient(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<f64>, GradError> {
        if let Some(name) = self.unsupported() {
            return Err(GradError::UnsupportedPrimitive(name));
        }
        let trace = self.trace.borrow();
        let out_idx = match output.tape {
            None => return Ok(vec![0.0; wrt.len()]),
            Some(t) if std::ptr::eq(t, self) => output.idx as usize,
            Some(_) => return Err(GradError::ForeignVariable),
        };
        let mut adj = vec![0.0; out_idx + 1];
        adj[out_idx] = 1.0;
        let mut hook_pos = trace.hooks.partition_point(|(i, _)| (*i as usize) <= out_idx);
        for i in (0..=out_idx).rev() {
            let a = adj[i];
            while hook_pos > 0 && trace.hooks[hook_pos - 1].0 as usize == i {
                hook_pos -= 1;
                if a != 0.0 {
                    (trace.hooks[hook_pos].1)(a, &mut adj);
                }
            }
            if a == 0.0 {
                continue;
            }
            let start = if i == 0 { 0 } else { trace.ends[i - 1] as usize };
            let end = trace.ends[i] as usize;
            for e in start..end {
                adj[trace.edge_parent[e] as usize] += a * trace.edge_partial[e];
            }
        }
        wrt.iter()
            .map(|v| match v.tape {
                None => Ok(0.0),
                Some(t) if std::ptr::eq(t, self) => Ok(adj.get(v.idx as usize).copied().unwrap_or(0.0)),
                Some(_) => Err(GradError::ForeignVariable),
            })
            .collect()
    }
}

/// A scalar that is either a constant or a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var({} @{})", self.val, self.idx),
            None => write!(f, "Const({})", self.val),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Self {
            tape: None,
            idx: 0,
            val,
        }
    }

    pub fn val(self) -> f64 {
        self.val
    }

    pub fn is_constant(self) -> bool {
        self.tape.is_none()
    }

    pub fn tape(self) -> Option<&'t Tape> {
        self.tape
    }

    /// Index of this node on its tape (leaves included).
    pub fn index(self) -> Option<u32> {
        self.tape.map(|_| self.idx)
    }

    fn unary(self, val: f64, d: f64) -> Self {
        match self.tape {
            None => Self::constant(val),
            Some(t) => {
                let idx = t.trace.borrow_mut().push(&[(self.idx, d)]);
                Self {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
        }
    }

    fn binary(self, other: Self, val: f64, da: f64, db: f64) -> Self {
        match (self.tape, other.tape) {
            (None, None) => Self::constant(val),
            (Some(t), None) => {
                let idx = t.trace.borrow_mut().push(&[(self.idx, da)]);
                Self { tape: Some(t), idx, val }
            }
            (None, Some(t)) => {
                let idx = t.trace.borrow_mut().push(&[(other.idx, db)]);
                Self { tape: Some(t), idx, val }
            }
            (Some(t), Some(_)) => {
                let idx = t.trace.borrow_mut().push(&[(self.idx, da), (other.idx, db)]);
                Self { tape: Some(t), idx, val }
            }
        }
    }

    fn unsupported(self, name: &'static str, val: f64) -> Self {
        if let Some(t) = self.tape {
            t.poison(name);
        }
        Self::constant(val)
    }
}

impl PartialEq for Var<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.val == other.val
    }
}

impl PartialOrd for Var<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.val.partial_cmp(&other.val)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl<'t> Rem for Var<'t> {
    type Output = Self;
    fn rem(self, rhs: Self) -> Self {
        let r = self.val % rhs.val;
        self.binary(rhs, r, 1.0, -(self.val / rhs.val).trunc())
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl Zero for Var<'_> {
    fn zero() -> Self {
        Self::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.val == 0.0
    }
}

impl One for Var<'_> {
    fn one() -> Self {
        Self::constant(1.0)
    }
}

impl Num for Var<'_> {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::constant)
    }
}

impl ToPrimitive for Var<'_> {
    fn to_i64(&self) -> Option<i64> {
        self.val.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.val.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.val)
    }
}

impl NumCast for Var<'_> {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Self::constant)
    }
}

impl FromPrimitive for Var<'_> {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Self::constant(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Self::constant(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Self::constant(n))
    }
}

macro_rules! consts {
    ($($name:ident),*) => {
        $(fn $name() -> Self { Self::constant(<f64 as FloatConst>::$name()) })*
    };
}

impl FloatConst for Var<'_> {
    consts!(
        E, FRAC_1_PI, FRAC_1_SQRT_2, FRAC_2_PI, FRAC_2_SQRT_PI, FRAC_PI_2, FRAC_PI_3, FRAC_PI_4,
        FRAC_PI_6, FRAC_PI_8, LN_10, LN_2, LOG10_E, LOG2_E, PI, SQRT_2
    );
}

macro_rules! unsupported_unary {
    ($($name:ident),*) => {
        $(fn $name(self) -> Self { self.unsupported(stringify!($name), self.val.$name()) })*
    };
}

impl Float for Var<'_> {
    fn nan() -> Self {
        Self::constant(f64::NAN)
    }
    fn infinity() -> Self {
        Self::constant(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Self::constant(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Self::constant(-0.0)
    }
    fn min_value() -> Self {
        Self::constant(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Self::constant(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Self::constant(f64::MAX)
    }
    fn epsilon() -> Self {
        Self::constant(f64::EPSILON)
    }
    fn is_nan(self) -> bool {
        self.val.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.val.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.val.is_finite()
    }
    fn is_normal(self) -> bool {
        self.val.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.val.classify()
    }
    fn floor(self) -> Self {
        Self::constant(self.val.floor())
    }
    fn ceil(self) -> Self {
        Self::constant(self.val.ceil())
    }
    fn round(self) -> Self {
        Self::constant(self.val.round())
    }
    fn trunc(self) -> Self {
        Self::constant(self.val.trunc())
    }
    fn fract(self) -> Self {
        self.unary(self.val.fract(), 1.0)
    }
    fn abs(self) -> Self {
        let d = if self.val < 0.0 { -1.0 } else { 1.0 };
        self.unary(self.val.abs(), d)
    }
    fn signum(self) -> Self {
        Self::constant(self.val.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.val.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.val.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        let r = 1.0 / self.val;
        self.unary(r, -r * r)
    }
    fn powi(self, n: i32) -> Self {
        let d = if n == 0 { 0.0 } else { n as f64 * self.val.powi(n - 1) };
        self.unary(self.val.powi(n), d)
    }
    fn powf(self, n: Self) -> Self {
        if n.tape.is_some() {
            return self.unsupported("powf", self.val.powf(n.val));
        }
        let d = if n.val == 0.0 { 0.0 } else { n.val * self.val.powf(n.val - 1.0) };
        self.unary(self.val.powf(n.val), d)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.val.exp2();
        self.unary(e, e * std::f64::consts::LN_2)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn log(self, base: Self) -> Self {
        if base.tape.is_some() {
            return self.unsupported("log", self.val.log(base.val));
        }
        self.unary(self.val.log(base.val), 1.0 / (self.val * base.val.ln()))
    }
    fn log2(self) -> Self {
        self.unary(self.val.log2(), 1.0 / (self.val * std::f64::consts::LN_2))
    }
    fn log10(self) -> Self {
        self.unary(self.val.log10(), 1.0 / (self.val * std::f64::consts::LN_10))
    }
    fn max(self, other: Self) -> Self {
        if self.val >= other.val || other.val.is_nan() {
            self
        } else {
            other
        }
    }
    fn min(self, other: Self) -> Self {
        if self.val <= other.val || other.val.is_nan() {
            self
        } else {
            other
        }
    }
    #[allow(deprecated)]
    fn abs_sub(self, other: Self) -> Self {
        (self - other).max(Self::zero())
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn tan(self) -> Self {
        let t = self.val.tan();
        self.unary(t, 1.0 + t * t)
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn atan2(self, other: Self) -> Self {
        self.unsupported("atan2", self.val.atan2(other.val))
    }
    unsupported_unary!(cbrt, asin, acos, atan, exp_m1, ln_1p, sinh, cosh, asinh, acosh, atanh);
    fn integer_decode(self) -> (u64, i16, i8) {
        self.val.integer_decode()
    }
}

impl Real for Var<'_> {
    fn value(self) -> f64 {
        self.val
    }
}

/// Value and flat gradient `[w, A (row-major), L (row-major)]` of a scalar
/// function of policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub value: f64,
    pub grad: Vec<f64>,
    pub stats: TapeStats,
}

/// Records `f` on a fresh tape with `params` as leaves and returns its value
/// and gradient.
pub fn record_and_grad<F>(params: &PolicyParams<f64>, f: F) -> Result<GradResult, GradError>
where
    F: for<'t> FnOnce(&PolicyParams<Var<'t>>) -> Var<'t>,
{
    let tape = Tape::new();
    let lifted = params.map(|x| tape.var(x));
    let out = f(&lifted);
    let grad = tape.gradient(out, &lifted.to_flat())?;
    Ok(GradResult {
        value: out.val,
        grad,
        stats: tape.stats(),
    })
}

/// Evaluates `f` without keeping the trace (values only).
pub fn evaluate<F>(params: &PolicyParams<f64>, f: F) -> f64
where
    F: for<'t> FnOnce(&PolicyParams<Var<'t>>) -> Var<'t>,
{
    f(&params.map(Var::constant)).val
}

/// Outcome of comparing engine gradients against central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteDiffReport {
    pub step: f64,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Components whose magnitude exceeded the comparison floor.
    pub compared: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl FiniteDiffReport {
    /// Components smaller than this in both routes are skipped.
    pub const MAGNITUDE_FLOOR: f64 = 1e-6;

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Central-difference check of [`record_and_grad`] on `f` at `params`.
pub fn finite_diff_check<F>(params: &PolicyParams<f64>, f: F, step: f64) -> Result<FiniteDiffReport, GradError>
where
    F: for<'t> Fn(&PolicyParams<Var<'t>>) -> Var<'t>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = record_and_grad(params, &f)?.grad;
    let flat = params.to_flat();
    let mut numeric = Vec::with_capacity(flat.len());
    let mut probe = flat.clone();
    for i in 0..flat.len() {
        probe[i] = flat[i] + step;
        let plus = evaluate(&params.with_flat(&probe), &f);
        probe[i] = flat[i] - step;
        let minus = evaluate(&params.with_flat(&probe), &f);
        probe[i] = flat[i];
        numeric.push((plus - minus) / (2.0 * step));
    }
    let mut max_rel_error: f64 = 0.0;
    let mut worst_index = None;
    let mut compared = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        if scale <= FiniteDiffReport::MAGNITUDE_FLOOR {
            continue;
        }
        compared += 1;
        let rel = (a - n).abs() / scale;
        if !(rel <= max_rel_error) {
            max_rel_error = rel;
            worst_index = Some(i);
        }
    }
    Ok(FiniteDiffReport {
        step,
        max_rel_error,
        worst_index,
        compared,
        analytic,
        numeric,
    })
}
