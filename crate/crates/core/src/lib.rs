//! Matrix-free prox-linear directions for composite objectives `ℓ ∘ f`.
//!
//! A prox-linear (modified Gauss-Newton) direction minimizes the loss
//! evaluated on a linearization of the network outputs plus a proximity
//! term `‖d‖² / 2γ`. With the loss replaced by its quadratic model the
//! subproblem is a convex quadratic that can be solved by conjugate gradient
//! either over the `p` parameters (primal) or over the `m × k` batch outputs
//! (dual). Everything here works through Jacobian-vector and
//! vector-Jacobian products, never materializing a Jacobian.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! wall-clock timing live in the `dualgn` companion crate.
//!
//! Module map:
//!
//! - [`linop`]: batched JVP/VJP operators and their adjoint/finite-difference checks.
//! - [`losses`]: squared and logistic loss oracles, conjugates and Hessian pseudo-inverses.
//! - [`cg`]: conjugate gradient and its projected, preconditioned variant.
//! - [`directions`]: primal, dual, closed-form and regularized direction solvers.
//! - [`models`]: linear and SiLU-MLP models with hand-written JVP/VJP, synthetic data.
//! - [`trainer`]: SPL, Armijo-SPL and SGD/momentum/Adam outer loops.
#![no_std]

extern crate alloc;

pub mod cg;
pub mod directions;
mod error;
pub mod linop;
pub mod losses;
pub mod models;
pub mod rng;
pub mod trainer;
mod vecops;

pub use error::{Error, Result};
pub use linop::{make_jacobian_operator, JacobianOperator, OutputBlock};
pub use losses::{LossKind, LossOracle};
pub use models::{Batch, Dataset, ModelSpec};

/// Flat parameter-space vector of length `p`.
pub type ParamVector = alloc::vec::Vec<f64>;

/// Dual variables share the `m × k` layout of the network outputs.
pub type DualBlock = OutputBlock;
