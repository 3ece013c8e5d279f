//! File formats, synthetic data, training and evaluation drivers, and the
//! command-line tool around `gradirn-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gtf;
pub mod pgm;
pub mod synth;
pub mod train;

pub use crate::error::{Error, Result};
pub use gradirn_core as core;
