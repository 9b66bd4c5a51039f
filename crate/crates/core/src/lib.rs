//! Model-based learning of swing-up controllers for the underactuated double
//! pendulum.
//!
//! The numeric core is generic over [`Real`] (`f32`, `f64`, and the
//! tape-recorded [`grad::Var`]); the aliases below fix the scalar to `f64`
//! for everyday use.

pub mod checks;
pub mod config;
pub mod control;
pub mod dynamics;
pub mod gp;
pub mod grad;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod optim;
pub mod optimizer;
pub mod policy;
pub mod scalar;
pub mod trainer;

pub use dynamics::Variant;
pub use scalar::Real;

pub type JointState = dynamics::JointState<f64>;
pub type PlantParams = dynamics::PlantParams<f64>;
pub type PolicyParams = policy::PolicyParams<f64>;
pub type Mat = linalg::Mat<f64>;

pub type JointState32 = dynamics::JointState<f32>;
pub type PlantParams32 = dynamics::PlantParams<f32>;
