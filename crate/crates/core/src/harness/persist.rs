//! Versioned, checksummed JSON envelopes for model artifacts.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autoencoder::AutoencoderModel;
use crate::cluster::{KMeansModel, PcaModel};
use crate::features::StandardizationParams;
use crate::iforest::IsolationForestModel;
use crate::ocsvm::OcsvmModel;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema_version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checksum mismatch: file says {stored}, payload hashes to {computed}")]
    Checksum { stored: String, computed: String },
    #[error("artifact kind {found:?}, expected {expected:?}")]
    Kind { expected: String, found: String },
}

pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

impl Artifact for IsolationForestModel {
    const KIND: &'static str = "isolation_forest";
}
impl Artifact for OcsvmModel {
    const KIND: &'static str = "ocsvm";
}
impl Artifact for AutoencoderModel {
    const KIND: &'static str = "autoencoder";
}
impl Artifact for KMeansModel {
    const KIND: &'static str = "kmeans";
}
impl Artifact for PcaModel {
    const KIND: &'static str = "pca";
}
impl Artifact for StandardizationParams {
    const KIND: &'static str = "standardization";
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    schema_version: u32,
    kind: String,
    checksum: String,
    payload: serde_json::Value,
}

fn digest(payload: &serde_json::Value) -> Result<String, PersistError> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(payload)?)))
}

pub fn to_json<T: Artifact>(model: &T) -> Result<String, PersistError> {
    let payload = serde_json::to_value(model)?;
    let envelope =
        Envelope { schema_version: SCHEMA_VERSION, kind: T::KIND.to_string(), checksum: digest(&payload)?, payload };
    let mut s = serde_json::to_string_pretty(&envelope)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: Artifact>(text: &str) -> Result<T, PersistError> {
    let envelope: Envelope = serde_json::from_str(text)?;
    if envelope.schema_version != SCHEMA_VERSION {
        return Err(PersistError::UnsupportedVersion { found: envelope.schema_version, supported: SCHEMA_VERSION });
    }
    if envelope.kind != T::KIND {
        return Err(PersistError::Kind { expected: T::KIND.to_string(), found: envelope.kind });
    }
    let computed = digest(&envelope.payload)?;
    if computed != envelope.checksum {
        return Err(PersistError::Checksum { stored: envelope.checksum, computed });
    }
    Ok(serde_json::from_value(envelope.payload)?)
}

pub fn save<T: Artifact>(path: &Path, model: &T) -> Result<(), PersistError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load<T: Artifact>(path: &Path) -> Result<T, PersistError> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iforest::IforestConfig;
    use crate::matrix::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        Matrix::from_rows(&rows)
    }

    #[test]
    fn forest_round_trip_scores_identically() {
        let x = data(1_000, 1);
        let model = IsolationForestModel::fit(&x, &IforestConfig::default()).unwrap();
        let back: IsolationForestModel = from_json(&to_json(&model).unwrap()).unwrap();
        assert_eq!(back, model);
        let a = model.score_matrix(&x).unwrap();
        let b = back.score_matrix(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn tampering_is_detected() {
        let model = IsolationForestModel::fit(&data(300, 2), &IforestConfig::default()).unwrap();
        let text = to_json(&model).unwrap();
        let marker = "\"score_threshold\": ";
        let at = text.find(marker).unwrap() + marker.len();
        let mut tampered = text.clone();
        tampered.insert(at, '9');
        assert!(matches!(from_json::<IsolationForestModel>(&tampered), Err(PersistError::Checksum { .. })));
    }

    #[test]
    fn future_version_and_wrong_kind_rejected() {
        let model = IsolationForestModel::fit(&data(300, 3), &IforestConfig::default()).unwrap();
        let text = to_json(&model).unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        assert!(matches!(
            from_json::<IsolationForestModel>(&text),
            Err(PersistError::UnsupportedVersion { found: 2, supported: 1 })
        ));
        let text = to_json(&model).unwrap();
        assert!(matches!(from_json::<OcsvmModel>(&text), Err(PersistError::Kind { .. })));
    }
}
