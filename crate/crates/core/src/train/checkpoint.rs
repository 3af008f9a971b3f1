use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KLinkModel, ModelConfig};
use crate::numeric::{Adam, ParamStore, Tensor};
use crate::signal::RunningStats;

pub const CHECKPOINT_FORMAT: &str = "klink-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: ModelConfig,
    pub epoch: usize,
    pub tensors: Vec<NamedTensor>,
    pub running_stats: Vec<RunningStats>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn from_model(model: &KLinkModel, epoch: usize, optimizer: Option<&Adam>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: model.config.hash(),
            config: model.config.clone(),
            epoch,
            tensors: model
                .params
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
            running_stats: model.running.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model, checking the header and that every tensor matches
    /// the shape a fresh model of this config would have.
    pub fn to_model(&self) -> Result<KLinkModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("not a checkpoint (format `{}`)", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", self.version)));
        }
        if self.config.hash() != self.config_hash {
            return Err(Error::invalid("checkpoint config hash does not match its config"));
        }
        let reference = KLinkModel::new(self.config.clone(), 0)?;
        let mut params = ParamStore::new();
        for t in &self.tensors {
            let expected = reference
                .params
                .get(&t.name)
                .ok_or_else(|| Error::invalid(format!("unexpected tensor `{}`", t.name)))?;
            if expected.shape() != t.shape.as_slice() {
                return Err(Error::shape("checkpoint", &[expected.shape(), &t.shape]));
            }
            params.insert(t.name.clone(), Tensor::new(t.shape.clone(), t.values.clone())?);
        }
        if params.len() != reference.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, model needs {}",
                params.len(),
                reference.params.len()
            )));
        }
        if self.running_stats.len() != reference.running.len() {
            return Err(Error::invalid("batch-norm statistics do not match the encoder depth"));
        }
        Ok(KLinkModel {
            config: self.config.clone(),
            params,
            running: self.running_stats.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
