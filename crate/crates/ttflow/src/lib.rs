//! Time integration of tensor differential equations on fixed-rank
//! tensor-train manifolds with interpolatory (DEIM-selected) tangent-space
//! projections, plus orthogonal-projection and step-truncation baselines.

pub mod error;
pub mod linalg;
pub mod tensor_core;

pub use error::{Error, Result};
pub mod sampling;
pub mod tt_format;
pub mod tangent_projection;
pub mod problems;
pub mod integrators;
pub mod runner;
