//! Learning nonlinear dynamic output-feedback controllers for partially
//! observed discrete-time LTI systems, with closed-loop stability guaranteed
//! for every parameter value.
//!
//! The architecture wraps a fixed stabilizing LQG observer-feedback law with
//! a learnable residual operator acting on the innovation signal (the Youla
//! arrangement). The residual is a recurrent equilibrium network (REN) built
//! from an unconstrained parameter vector through a smooth normalization that
//! makes every instance contracting with a certified incremental ℓ² gain, so
//! gradient descent and random search can move freely in parameter space
//! without ever leaving the set of stabilizing controllers.
//!
//! Module map:
//!
//! - [`lti`]: plant representation, cart-pole construction, DARE solver,
//!   LQR/Kalman gain synthesis, finite-horizon LQG baseline.
//! - [`ren`]: the REN model, its direct parameterization, and contraction /
//!   gain certificates with empirical verification.
//! - [`youla`]: base controller, Youla and plain-feedback policies, and the
//!   closed-loop transfer decomposition used to validate superposition.
//! - [`rollout`]: scenario sampling, closed-loop simulation, cost functionals.
//! - [`grad`]: exact reverse-mode gradients through the whole rollout, plus a
//!   finite-difference oracle.
//! - [`train`]: Adam, gradient clipping, the modified random-search gradient
//!   estimator, and the epoch loop producing learning curves.

pub mod error;
pub mod grad;
pub mod linalg;
pub mod lti;
pub mod ren;
pub mod rollout;
pub mod train;
pub mod youla;

pub use error::{Error, Result};
