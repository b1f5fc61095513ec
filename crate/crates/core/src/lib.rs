//! Preference-guided score distillation on analytic toy models.
//!
//! Everything here is exact: the score model is a Gaussian mixture whose
//! noised marginal is known in closed form, rewards are analytic, and the
//! "3D representation" is a set of linear camera maps.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod guidance;
pub mod oracle;
pub mod representation;
pub mod rewards;
pub mod schedule;
pub mod score;
pub mod stats;
pub mod streams;
pub mod tasks;

pub use error::{PsdError, Result};
