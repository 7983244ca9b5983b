//! Unsupervised card-fraud detection: ingestion, feature engineering,
//! anomaly detectors, clustering, composite and adaptive risk scoring, and a
//! labelled synthetic corpus to evaluate them against.

pub mod arf;
pub mod autoencoder;
pub mod cluster;
pub mod features;
pub mod harness;
pub mod iforest;
pub mod ingest;
pub mod matrix;
pub mod ocsvm;
pub mod quantile;
pub mod risk;
pub mod synthgen;
