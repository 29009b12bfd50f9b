//! Any evaluable model file: a dense backbone, a controller checkpoint or
//! an exported mixture of experts.

use std::path::Path;

use crate::checkpoint::{dense_from_container, Checkpoint, CHECKPOINT_KIND, DENSE_KIND};
use crate::error::{Error, Result};
use crate::io::Container;
use crate::masked::{tomoe_logits, MaskPolicy};
use crate::model::{DenseWeights, ModelConfig};
use crate::runtime::export::EXPORT_KIND;
use crate::runtime::{moe_forward, MoeExport};
use crate::tensor::Tensor;

pub enum LoadedModel {
    Dense(ModelConfig, DenseWeights),
    /// Evaluated with noiseless threshold masks.
    Checkpoint(Box<Checkpoint>),
    Moe(Box<MoeExport>),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        match c.kind.as_str() {
            DENSE_KIND => {
                let (cfg, d) = dense_from_container(&c)?;
                Ok(LoadedModel::Dense(cfg, d))
            }
            CHECKPOINT_KIND => Ok(LoadedModel::Checkpoint(Box::new(Checkpoint::from_container(&c)?))),
            EXPORT_KIND => Ok(LoadedModel::Moe(Box::new(MoeExport::from_container(&c)?))),
            other => Err(Error::Format(format!("unknown model kind {other}"))),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            LoadedModel::Dense(cfg, _) => cfg,
            LoadedModel::Checkpoint(c) => &c.model,
            LoadedModel::Moe(m) => m.cfg(),
        }
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        match self {
            LoadedModel::Dense(cfg, d) => d.logits(cfg, tokens),
            LoadedModel::Checkpoint(c) => {
                tomoe_logits(&c.model, &c.dense, &c.controllers, tokens, &MaskPolicy::Threshold)
            }
            LoadedModel::Moe(m) => Ok(moe_forward(m, tokens)?.0),
        }
    }
}
