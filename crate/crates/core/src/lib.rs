// Negated comparisons deliberately reject NaN parameters; estimator entry
// points take their budgets positionally.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod coefficients;
pub mod config;
pub mod ergodic;
pub mod error;
pub mod flows;
pub mod harness;
pub mod identity;
pub mod mc;
pub mod noise;
pub mod observable;
pub mod output;
pub mod semigroup;
pub mod spectral;

pub use error::{Error, Result};
