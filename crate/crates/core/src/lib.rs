//! Transient gas flow on pipeline networks.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod bounds;
pub mod cli;
pub mod control;
pub mod error;
pub mod incidence;
pub mod linearize;
pub mod lp;
pub mod network;
pub mod simulate;
pub mod sparse;
pub mod spectral;

pub use error::{Error, Result};
