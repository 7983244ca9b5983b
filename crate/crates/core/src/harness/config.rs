use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arf::ArfConfig;
use crate::autoencoder::TrainConfig;
use crate::cluster::{DbscanConfig, KMeansConfig};
use crate::iforest::IforestConfig;
use crate::ingest::CleanOptions;
use crate::ocsvm::OcsvmConfig;
use crate::risk::RiskConfig;
use crate::synthgen::GenConfig;

pub const OUT_ENV: &str = "FRAUDLAB_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    /// Directory holding the four input tables; unset means generate them.
    pub input_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("fraudlab-out"), input_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSettings {
    pub kmeans: KMeansConfig,
    pub dbscan: DbscanConfig,
    pub elbow_max_k: usize,
    pub silhouette_sample: usize,
    /// Rows drawn for the k-distance curve.
    pub k_distance_sample: usize,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self {
            kmeans: KMeansConfig::default(),
            dbscan: DbscanConfig::default(),
            elbow_max_k: 10,
            silhouette_sample: 2000,
            k_distance_sample: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionPolicy {
    pub prior: f64,
    #[serde(default)]
    pub legal_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArfSettings {
    pub engine: ArfConfig,
    pub regions: BTreeMap<String, RegionPolicy>,
    /// Train on ground-truth labels when the corpus has them.
    pub use_labels: bool,
}

impl Default for ArfSettings {
    fn default() -> Self {
        let region = |p| RegionPolicy { prior: p, legal_weight: 0.0 };
        Self {
            engine: ArfConfig::default(),
            regions: [("metro", region(0.005)), ("tier2", region(0.01)), ("rural", region(0.02))]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            use_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub contamination: Vec<f64>,
    pub nu: Vec<f64>,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub generator: GenConfig,
    pub ingest: CleanOptions,
    pub iforest: IforestConfig,
    pub ocsvm: OcsvmConfig,
    pub autoencoder: TrainConfig,
    pub cluster: ClusterSettings,
    pub risk: RiskConfig,
    pub arf: ArfSettings,
    pub sweep: SweepConfig,
    /// Write SVG charts alongside the CSV reports.
    pub render_svg: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            paths: PathsConfig::default(),
            generator: GenConfig::default(),
            ingest: CleanOptions::default(),
            iforest: IforestConfig::default(),
            ocsvm: OcsvmConfig::default(),
            autoencoder: TrainConfig::default(),
            cluster: ClusterSettings::default(),
            risk: RiskConfig::default(),
            arf: ArfSettings::default(),
            sweep: SweepConfig::default(),
            render_svg: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets every module seed to `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.generator.seed = seed;
        self.iforest.seed = seed;
        self.ocsvm.seed = seed;
        self.autoencoder.seed = seed;
        self.cluster.kmeans.seed = seed;
    }

    /// `FRAUDLAB_OUT` wins over the configured directory.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            self.paths.out_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.paths.input_dir.is_none() {
            self.generator.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.arf.engine.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, r) in &self.arf.regions {
            if !(r.prior > 0.0 && r.prior < 1.0) || !(r.legal_weight >= 0.0 && r.legal_weight.is_finite()) {
                return bad(format!("arf region {name:?}: prior must be in (0, 1), legal_weight non-negative"));
            }
        }
        if self.cluster.elbow_max_k == 0 || self.cluster.silhouette_sample < 2 || self.cluster.k_distance_sample < 2 {
            return bad("cluster sample sizes must be at least 2 and elbow_max_k positive".into());
        }
        for &c in &self.sweep.contamination {
            if !(c > 0.0 && c < 0.5) {
                return bad(format!("sweep contamination {c} outside (0, 0.5)"));
            }
        }
        for &v in &self.sweep.nu {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("sweep nu {v} outside (0, 1]"));
            }
        }
        for &e in &self.sweep.eps {
            if !(e > 0.0 && e.is_finite()) {
                return bad(format!("sweep eps {e} must be positive"));
            }
        }
        Ok(())
    }
}
