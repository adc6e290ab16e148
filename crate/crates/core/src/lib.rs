//! Finite-horizon LQR synthesis for linear systems with uncertain dynamics.

// NaN must fail range checks, which `!(x > 0.0)` does by construction.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
mod error;
pub mod evaluation;
pub mod experiments;
pub mod linalg;
pub mod lti;
pub mod output;
pub mod riccati;
pub mod sdp;
pub mod synthesis;
pub mod sysid;

pub use error::Error;
