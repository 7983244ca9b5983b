//! K-Means, DBSCAN and PCA over the standardized feature matrix.

pub mod dbscan;
pub mod kmeans;
pub mod pca;

use thiserror::Error;

pub use dbscan::{dbscan, dbscan_with, k_distance, DbscanConfig, DbscanResult, NeighborSearch, NOISE};
pub use kmeans::{elbow_curve, kmeans_fit, silhouette, KMeansConfig, KMeansModel};
pub use pca::{pca_project, PcaModel};

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("need at least {need} rows, got {n}")]
    TooFewRows { n: usize, need: usize },
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("{0}")]
    Parameter(String),
}
