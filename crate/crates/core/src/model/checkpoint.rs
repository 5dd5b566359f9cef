//! JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "liveness-checkpoint",
//!   "version": 1,
//!   "model": { "k": 10, "domains": 3, ... },
//!   "meta": { ...free-form training config echo... },
//!   "params": { "tensors": { "enc.0.w": { "shape": [...], "data": [...] }, ... } }
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is exact and
//! identical parameters always produce identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::ParamSet;
use crate::error::{at_path, Error, Result};

use super::{LivenessModel, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "liveness-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn from_model(model: &LivenessModel, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: model.config().clone(),
            meta,
            params: model.params().clone(),
        }
    }

    pub fn into_model(self) -> Result<LivenessModel> {
        LivenessModel::from_params(self.model, self.params)
    }
}

pub fn save_checkpoint(path: &Path, model: &LivenessModel, meta: serde_json::Value) -> Result<()> {
    let ckpt = Checkpoint::from_model(model, meta);
    fs::write(path, serde_json::to_vec(&ckpt)?).map_err(at_path(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(at_path(path))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: unexpected format tag {:?}",
            path.display(),
            ckpt.format
        )));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {}",
            path.display(),
            ckpt.version
        )));
    }
    // validates layout and finiteness
    LivenessModel::from_params(ckpt.model.clone(), ckpt.params.clone())?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig {
            k: 4,
            domains: 3,
            encoder_widths: vec![3, 5],
            domain_hidden: 4,
            input_size: (12, 10),
            ..ModelConfig::default()
        };
        let model = LivenessModel::init(cfg, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&path, &model, serde_json::json!({"seed": 99})).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta["seed"], 99);
        let back = loaded.into_model().unwrap();
        assert_eq!(back, model);
        save_checkpoint(&path, &back, serde_json::json!({"seed": 99})).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        let model = LivenessModel::init(ModelConfig::default(), 1).unwrap();
        let mut ckpt = Checkpoint::from_model(&model, serde_json::Value::Null);
        ckpt.format = "something-else".into();
        fs::write(&path, serde_json::to_vec(&ckpt).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"{").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
