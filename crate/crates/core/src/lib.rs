//! Scheduling inference and unlearning requests on a sharded ensemble.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certification;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod oracle;
pub mod scheduler;
pub mod simulator;
pub mod theory;
pub mod workload;

pub use error::{Error, Result};
