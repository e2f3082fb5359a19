// NaN must fail range checks, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio2expression;
pub mod error;
pub mod eval_harness;
pub mod explicit_memory;
pub mod face_model;
pub mod memory_attention;
pub mod nn;
pub mod renderer;
pub mod storage;
pub mod synth_data;

pub use error::{Error, Result};
