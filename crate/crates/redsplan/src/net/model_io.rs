//! Versioned model container: architecture tag, metadata and all tensors
//! in one self-describing JSON file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::baselines::{baseline_forward, BaselineParams};
use super::deepset::{reds_forward, RedsParams};
use super::{Arch, FeatureSplit, NetError, Prediction};
use crate::model::PlannerParams;

pub const MODEL_FORMAT: &str = "redsplan-model";
pub const MODEL_VERSION: u32 = 1;

/// Any trained predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum NetModel {
    DeepSet(RedsParams),
    Baseline(BaselineParams),
}

impl NetModel {
    pub fn arch(&self) -> Arch {
        match self {
            NetModel::DeepSet(p) => p.arch(),
            NetModel::Baseline(p) => p.arch(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            NetModel::DeepSet(p) => p.param_count(),
            NetModel::Baseline(p) => p.param_count(),
        }
    }

    /// Predicts the binary logits for one scenario.
    pub fn forward(&self, pi: &PlannerParams, horizon: usize) -> Result<Prediction, NetError> {
        match self {
            NetModel::DeepSet(p) => reds_forward(p, &FeatureSplit::from_params(pi), horizon),
            NetModel::Baseline(p) => baseline_forward(p, pi, horizon),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    arch: Arch,
    model: NetModel,
}

pub fn save_model(model: &NetModel, path: &Path) -> Result<(), NetError> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        arch: model.arch(),
        model: model.clone(),
    };
    let json = serde_json::to_string(&file).map_err(|e| NetError::ModelFile(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| NetError::ModelFile(e.to_string()))
}

pub fn load_model(path: &Path) -> Result<NetModel, NetError> {
    let data = std::fs::read_to_string(path).map_err(|e| NetError::ModelFile(e.to_string()))?;
    let file: ModelFile =
        serde_json::from_str(&data).map_err(|e| NetError::ModelFile(e.to_string()))?;
    if file.format != MODEL_FORMAT {
        return Err(NetError::ModelFile(format!("unknown format {}", file.format)));
    }
    if file.version != MODEL_VERSION {
        return Err(NetError::ModelFile(format!(
            "unsupported version {}",
            file.version
        )));
    }
    Ok(file.model)
}
