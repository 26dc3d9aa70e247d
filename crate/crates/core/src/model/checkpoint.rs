use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{EpochRecord, TrainOutcome};
use super::{GatModel, ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A parameter tensor in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint: config, tensors, training history and whatever run
/// context the caller wants to keep next to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub in_dim: usize,
    pub class_weights: [f64; 2],
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub tensors: Vec<NamedTensor>,
    #[serde(default)]
    pub context: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: &GatModel, class_weights: [f64; 2], best_epoch: usize, history: Vec<EpochRecord>) -> Self {
        let p = &model.params;
        let tensors = p
            .names()
            .into_iter()
            .zip(p.shapes())
            .zip(p.slices())
            .map(|((name, shape), data)| NamedTensor {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            in_dim: model.in_dim,
            class_weights,
            best_epoch,
            history,
            tensors,
            context: serde_json::Value::Null,
        }
    }

    pub fn from_outcome(outcome: &TrainOutcome) -> Self {
        Self::new(&outcome.model, outcome.class_weights, outcome.best_epoch, outcome.history.clone())
    }

    /// Rebuilds the model, checking every tensor against the shapes the
    /// config implies.
    pub fn to_model(&self) -> Result<GatModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} (this build reads {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
        let mut params = ModelParams::zeros(self.in_dim, &self.config);
        let (names, shapes) = (params.names(), params.shapes());
        if self.tensors.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors, config implies {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for (((t, name), shape), dst) in self.tensors.iter().zip(names).zip(shapes).zip(params.slices_mut()) {
            if t.name != name || t.shape != shape || t.data.len() != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} ({} values), expected `{name}` {shape:?}",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            dst.copy_from_slice(&t.data);
        }
        let model = GatModel {
            config: self.config.clone(),
            in_dim: self.in_dim,
            params,
        };
        model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
