//! Mini-batch rank-sensitive training for implicit-feedback recommenders.
//!
//! A hybrid matrix factorization model ([`model`]) is trained with rank
//! estimates computed over a shared item sample ([`rank`], [`objective`],
//! [`train`]) and evaluated with top-k metrics ([`eval`]).

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod objective;
pub mod rank;
pub mod study;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
