use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FlowConfig, FlowModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "fab-flow-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk JSON form of a [`FlowModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub dim: usize,
    pub layers: usize,
    pub config: FlowConfig,
    /// Hash of the experiment config that produced the parameters.
    pub config_hash: String,
    pub iteration: usize,
    parameters: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_flow(flow: &FlowModel, config_hash: &str, iteration: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dim: flow.dim(),
            layers: flow.layers().len(),
            config: flow.config().clone(),
            config_hash: config_hash.to_string(),
            iteration,
            parameters: flow
                .parameters()
                .into_iter()
                .map(|t| StoredTensor {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("unsupported format {:?} version {}", ck.format, ck.version),
            });
        }
        Ok(ck)
    }

    /// Rebuilds the flow, rejecting a dimension other than `expected_dim`.
    pub fn to_flow(&self, expected_dim: Option<usize>) -> Result<FlowModel> {
        if let Some(d) = expected_dim {
            if d != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: self.dim,
                });
            }
        }
        if self.config.layers != self.layers {
            return Err(Error::InvalidArgument(format!(
                "checkpoint lists {} layers but its config has {}",
                self.layers, self.config.layers
            )));
        }
        let mut flow = FlowModel::new(self.dim, &self.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let tensors = self
            .parameters
            .iter()
            .map(|s| Tensor::new(s.shape.clone(), s.data.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        flow.set_parameters(&tensors)?;
        Ok(flow)
    }
}

impl FlowModel {
    pub fn save_checkpoint(&self, path: &Path, config_hash: &str, iteration: usize) -> Result<()> {
        Checkpoint::from_flow(self, config_hash, iteration).save(path)
    }

    pub fn load_checkpoint(path: &Path, expected_dim: usize) -> Result<Self> {
        Checkpoint::load(path)?.to_flow(Some(expected_dim))
    }
}
