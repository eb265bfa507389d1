// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diff;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod selfcheck;
pub mod serialize;
pub mod synthdata;
pub mod taxonomy;

pub use error::{Error, Result};
