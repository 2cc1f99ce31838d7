//! Batch transaction-graph feature engineering and supervised detection of
//! suspicious (money-laundering / phishing) transactions.
//!
//! The pipeline turns raw transaction tables into node-, community-, and
//! flow-level features, scores nodes with an isolation forest, and trains a
//! gradient-boosted classifier evaluated on minority-class F1.

pub mod error;
pub mod util;

pub mod ingest;
pub mod graph;
pub mod communities;
pub mod flow;
pub mod subgraph;
pub mod anomaly;
pub mod model;
pub mod fixture;
pub mod pipeline;

pub use error::{Error, Result};
