//! Model weights plus optimizer state, persisted in the shared container.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tokensplit_tensor::{Real, Tensor};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::denoiser::DenoiserModel;
use crate::optim::Adam;
use crate::text::Vocabulary;

const KIND: &str = "checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    kind: String,
    model: ModelConfig,
    vocabulary: Vocabulary,
    step: u64,
    optimizer_step: u64,
    lr: f64,
}

/// Everything needed to resume training or to sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: DenoiserModel<T>,
    pub optimizer: Adam<T>,
    /// Completed training steps.
    pub step: u64,
}

impl<T: Real> Checkpoint<T> {
    pub fn fresh(config: ModelConfig, seed: u64, lr: f64) -> Result<Self> {
        let model = DenoiserModel::new(config, seed)?;
        let tensors: Vec<Tensor<T>> = model.params.iter().map(|(_, t)| t.clone()).collect();
        Ok(Checkpoint {
            optimizer: Adam::new(lr, &tensors),
            model,
            step: 0,
        })
    }

    pub fn to_container(&self) -> Container<T> {
        let meta = Meta {
            kind: KIND.into(),
            model: self.model.config.clone(),
            vocabulary: self.model.vocab.clone(),
            step: self.step,
            optimizer_step: self.optimizer.step,
            lr: self.optimizer.lr,
        };
        let mut c = Container::new(json!(meta));
        for (i, (name, t)) in self.model.params.iter().enumerate() {
            c.push(format!("param/{name}"), t.clone());
            c.push(format!("adam.m/{name}"), self.optimizer.m[i].clone());
            c.push(format!("adam.v/{name}"), self.optimizer.v[i].clone());
        }
        c
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        let meta: Meta = serde_json::from_value(c.meta.clone())?;
        if meta.kind != KIND {
            return Err(Error::Format(format!("expected a checkpoint, found `{}`", meta.kind)));
        }
        let mut model = DenoiserModel::with_vocab(meta.model, meta.vocabulary, 0)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_owned()).collect();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (name, slot) in names.iter().zip(model.params.tensors_mut()) {
            let p = c.require(&format!("param/{name}"))?;
            if p.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    p.shape(),
                    slot.shape()
                )));
            }
            *slot = p.clone();
            m.push(c.require(&format!("adam.m/{name}"))?.clone());
            v.push(c.require(&format!("adam.v/{name}"))?.clone());
        }
        let mut optimizer = Adam::new(meta.lr, &m);
        optimizer.step = meta.optimizer_step;
        optimizer.m = m;
        optimizer.v = v;
        Ok(Checkpoint {
            model,
            optimizer,
            step: meta.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
