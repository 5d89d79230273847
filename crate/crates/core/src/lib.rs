// `!(x > min)` guards are deliberate: they reject NaN along with small values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod corpora;
pub mod dissociation;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod intervention;
mod io_util;
pub mod numerics;
pub mod toy_models;

pub use error::{Error, Result};
