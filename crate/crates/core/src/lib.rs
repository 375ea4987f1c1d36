// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod conformal;
pub mod config;
pub mod error;
pub mod filters;
pub mod fingerprint;
pub mod linalg;
pub mod model;
pub mod report;
pub mod rng;
pub mod unscented;

pub use error::{Error, Result};
