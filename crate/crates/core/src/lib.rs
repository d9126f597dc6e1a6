//! Dense tensor math, contrastive losses, a residual adapter encoder and the
//! data, mining, training and evaluation pipeline around them.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the matrix formulas they implement.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mining;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
