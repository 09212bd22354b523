// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod argmetrics;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod glmm;
pub mod mil;
pub mod pipeline;
pub mod synth;
pub mod textfeats;

pub use error::{Error, Result};

/// Tool name and version written into output headers.
pub const GENERATOR: &str = concat!("argchange ", env!("CARGO_PKG_VERSION"));
