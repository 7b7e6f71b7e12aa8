//! Numerical tools for Anosov diffeomorphisms of tori.

// `!(x <= cap)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod manifolds;
pub mod nd;
pub mod presets;
pub mod regularity;
pub mod sampling;
pub mod splitting2;
pub mod torus;

pub use error::{Error, Result};
