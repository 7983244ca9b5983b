//! Configuration, evaluation metrics, artifact persistence, the end-to-end
//! pipeline and report rendering.

pub mod config;
pub mod metrics;
pub mod persist;
pub mod pipeline;
pub mod report;
pub mod svg;

pub use config::{ConfigError, PipelineConfig};
pub use metrics::{auc, metrics, EvalReport, EvalRow, MetricsError};
pub use persist::{Artifact, PersistError, SCHEMA_VERSION};
pub use pipeline::{run_pipeline, Layout, PipelineError, PipelineRun, Stage};
