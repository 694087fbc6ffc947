//! Deterministic federated semi-supervised learning simulator.
//!
//! The crate implements a small softmax classifier trained by federated
//! averaging across churning clients, a server-side monitor that estimates
//! per-class sample-count change ratios from output-row movement, and the
//! class-variable response to those estimates: output-row carry-forward for
//! vanished classes and ratio-proportional pseudo-label self-training.
//!
//! | module | contents |
//! |--------|----------|
//! | [`nn`] | one-hidden-layer ReLU/softmax network, SGD |
//! | [`dataset`] | Gaussian blobs, stratified splits, churn schedules |
//! | [`monitor`] | change-ratio estimation, class cases, `mu` |
//! | [`selftrain`] | pseudo-labeling and subset selection |
//! | [`federation`] | aggregation, carry-forward, rounds, scenarios |
//! | [`metrics`] | confusion matrix, macro precision/recall/F1 |
//!
//! Client training inside a round runs on rayon when the `parallel` feature
//! is enabled (the default). Reductions always happen in client-id order, so
//! results do not depend on the execution mode.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod federation;
pub mod metrics;
pub mod monitor;
pub mod nn;
pub mod seed;
pub mod selftrain;

pub use error::{Error, Result};
pub use exec::Execution;
