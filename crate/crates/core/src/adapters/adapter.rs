use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tokensplit_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::SplitMix64;

/// Which cross-attention projections an adapter modifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "value")]
    Value,
    #[serde(rename = "key")]
    Key,
    #[serde(rename = "key+value")]
    KeyValue,
}

impl Variant {
    pub fn touches(self, target: Target) -> bool {
        matches!(
            (self, target),
            (Variant::Value, Target::Value) | (Variant::Key, Target::Key) | (Variant::KeyValue, _)
        )
    }

    /// Key-modifying variants exist only to reproduce attention disruption.
    pub fn is_ablation(self) -> bool {
        self != Variant::Value
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Value => "value",
            Variant::Key => "key",
            Variant::KeyValue => "key+value",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value" => Ok(Variant::Value),
            "key" => Ok(Variant::Key),
            "key+value" | "key_value" => Ok(Variant::KeyValue),
            other => Err(Error::config("variant", format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Key,
    Value,
}

impl Target {
    pub fn label(self) -> &'static str {
        match self {
            Target::Key => "key",
            Target::Value => "value",
        }
    }
}

/// Rank-`r` delta `x ↦ B·(A·x)` with `A: (r × in)`, `B: (out × r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank<T> {
    pub down: Tensor<T>,
    pub up: Tensor<T>,
}

impl<T: Real> LowRank<T> {
    /// Gaussian `A`, zero `B`: the fresh delta is exactly zero.
    pub fn fresh(rank: usize, in_dim: usize, out_dim: usize, rng: &mut SplitMix64) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let down = (0..rank * in_dim).map(|_| T::lit(rng.normal() * std)).collect();
        LowRank {
            down: Tensor::from_vec(&[rank, in_dim], down).expect("shape"),
            up: Tensor::zeros(&[out_dim, rank]),
        }
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.up.shape()[0]
    }

    /// Rows of `x` (`k × in`) mapped to `k × out`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = x.matmul(&self.down.transpose()?)?;
        Ok(h.matmul(&self.up.transpose()?)?)
    }

    /// Dense `B·A`, shape `(out × in)`.
    pub fn dense(&self) -> Result<Tensor<T>> {
        Ok(self.up.matmul(&self.down)?)
    }

    pub fn cast<U: Real>(&self) -> LowRank<U> {
        LowRank {
            down: self.down.cast(),
            up: self.up.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdapter<T> {
    pub value: Option<LowRank<T>>,
    pub key: Option<LowRank<T>>,
}

impl<T> BlockAdapter<T> {
    pub fn get(&self, target: Target) -> Option<&LowRank<T>> {
        match target {
            Target::Key => self.key.as_ref(),
            Target::Value => self.value.as_ref(),
        }
    }
}

/// Training summary stored alongside an adapter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterInfo {
    pub iterations: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Low-rank deltas for one concept, one pair per cross-attention block,
/// bound to a single prompt word.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptAdapter<T> {
    pub name: String,
    pub word: String,
    pub rank: usize,
    pub variant: Variant,
    pub blocks: Vec<BlockAdapter<T>>,
    pub info: AdapterInfo,
}

impl<T: Real> ConceptAdapter<T> {
    pub fn fresh(
        name: impl Into<String>,
        word: impl Into<String>,
        variant: Variant,
        rank: usize,
        config: &ModelConfig,
        seed: u64,
    ) -> Self {
        let mut rng = SplitMix64::stream(seed, 0xADA7);
        let blocks = (0..config.blocks)
            .map(|_| BlockAdapter {
                value: variant
                    .touches(Target::Value)
                    .then(|| LowRank::fresh(rank, config.text_dim, config.value_dim, &mut rng)),
                key: variant
                    .touches(Target::Key)
                    .then(|| LowRank::fresh(rank, config.text_dim, config.attn_dim, &mut rng)),
            })
            .collect();
        ConceptAdapter {
            name: name.into(),
            word: word.into(),
            rank,
            variant,
            blocks,
            info: AdapterInfo::default(),
        }
    }

    /// Value delta for one text-feature row at `block`.
    pub fn forward(&self, block: usize, c_i: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_target(block, Target::Value, c_i)
    }

    pub fn forward_target(&self, block: usize, target: Target, c_i: &Tensor<T>) -> Result<Tensor<T>> {
        let lr = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::contract(format!("adapter `{}` has no block {block}", self.name)))?
            .get(target)
            .ok_or_else(|| {
                Error::contract(format!(
                    "adapter `{}` does not modify the {} projection",
                    self.name,
                    target.label()
                ))
            })?;
        let (_, d) = c_i.dims2("adapter_forward")?;
        if d != lr.in_dim() {
            return Err(Error::contract(format!(
                "block {block}: adapter `{}` expects {}-wide embeddings, got {d}",
                self.name,
                lr.in_dim()
            )));
        }
        lr.apply(c_i)
    }

    /// Named tensors in a fixed order: per block, value then key, down then up.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (b, blk) in self.blocks.iter().enumerate() {
            for target in [Target::Value, Target::Key] {
                if let Some(lr) = blk.get(target) {
                    out.push((format!("b{b}/{}/down", target.label()), &lr.down));
                    out.push((format!("b{b}/{}/up", target.label()), &lr.up));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for blk in &mut self.blocks {
            for lr in [&mut blk.value, &mut blk.key].into_iter().flatten() {
                out.push(&mut lr.down);
                out.push(&mut lr.up);
            }
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ConceptAdapter<U> {
        ConceptAdapter {
            name: self.name.clone(),
            word: self.word.clone(),
            rank: self.rank,
            variant: self.variant,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockAdapter {
                    value: b.value.as_ref().map(LowRank::cast),
                    key: b.key.as_ref().map(LowRank::cast),
                })
                .collect(),
            info: self.info.clone(),
        }
    }
}
