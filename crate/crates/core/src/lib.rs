// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod container;
pub mod entropymodel;
pub mod error;
mod io;
pub mod ispsim;
mod kv;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod ordermask;
pub mod quant;
pub mod rangecoder;
pub mod train;

pub use error::{Error, Result};
