// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod flops;
pub mod growth;
pub mod network;
pub mod numerics;
pub mod templates;
pub mod trainer;

pub use error::{Error, Result};
