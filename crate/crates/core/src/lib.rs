//! Delay-adjusted prediction of many-per-click conversion counts.

// `!(x > 0.0)` is how parameter checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod duration;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod regressor;
pub mod types;
pub mod variants;

pub use error::{Error, Result};
