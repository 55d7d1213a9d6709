//! Sparsified, adaptively clipped differentially private federated learning
//! over a shared wireless uplink.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod config;
pub mod dpsgd;
pub mod error;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod scheduler;
pub mod simulator;
pub mod verify;
pub mod wireless;

pub use error::{Error, Result};
