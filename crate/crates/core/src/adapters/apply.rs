//! Routing adapter deltas into projection rows.
//!
//! Token-wise mode adds an adapter's output only to the row of its bound
//! token; all other rows are copied through unchanged. Merged mode applies
//! the weighted sum of all adapters to every row.

use serde::{Deserialize, Serialize};
use tokensplit_tensor::{Real, Tape, Tensor, Var};

use crate::adapters::adapter::{ConceptAdapter, Target};
use crate::error::{Error, Result};
use crate::text::EncodedPrompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MergeMode {
    #[default]
    #[serde(rename = "token-wise")]
    TokenWise,
    #[serde(rename = "merged")]
    Merged,
}

#[derive(Debug, Clone)]
pub struct AdapterEntry<'a, T> {
    pub adapter: &'a ConceptAdapter<T>,
    /// Token index of the bound word in the current prompt.
    pub position: usize,
    /// Only used in merged mode.
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct AdapterSet<'a, T> {
    pub mode: MergeMode,
    pub entries: Vec<AdapterEntry<'a, T>>,
}

impl<'a, T: Real> AdapterSet<'a, T> {
    pub fn new(mode: MergeMode) -> Self {
        AdapterSet {
            mode,
            entries: Vec::new(),
        }
    }

    pub fn token_wise() -> Self {
        Self::new(MergeMode::TokenWise)
    }

    pub fn merged() -> Self {
        Self::new(MergeMode::Merged)
    }

    pub fn push(&mut self, adapter: &'a ConceptAdapter<T>, position: usize) -> &mut Self {
        self.push_weighted(adapter, position, 1.0)
    }

    pub fn push_weighted(&mut self, adapter: &'a ConceptAdapter<T>, position: usize, weight: f64) -> &mut Self {
        self.entries.push(AdapterEntry {
            adapter,
            position,
            weight,
        });
        self
    }

    /// Binds each adapter to the first occurrence of its word in `prompt`.
    pub fn for_prompt(mode: MergeMode, adapters: &[&'a ConceptAdapter<T>], prompt: &EncodedPrompt) -> Result<Self> {
        let mut set = Self::new(mode);
        for a in adapters {
            set.push(a, prompt.position(&a.word)?);
        }
        if set.len() > prompt.len() {
            return Err(Error::contract(format!(
                "{} adapters for a prompt of {} tokens",
                set.len(),
                prompt.len()
            )));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    /// Places adapter weights on `tape`. With `trainable`, gradients flow to
    /// them.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> AdapterHook<T> {
        let entries = self
            .entries
            .iter()
            .map(|e| BoundEntry {
                position: e.position,
                weight: e.weight,
                blocks: e
                    .adapter
                    .blocks
                    .iter()
                    .map(|b| {
                        let mut bind = |lr: &crate::adapters::LowRank<T>| LowRankVars {
                            down: tape.leaf(lr.down.clone(), trainable),
                            up: tape.leaf(lr.up.clone(), trainable),
                        };
                        BoundBlock {
                            value: b.value.as_ref().map(&mut bind),
                            key: b.key.as_ref().map(&mut bind),
                        }
                    })
                    .collect(),
            })
            .collect();
        AdapterHook {
            mode: self.mode,
            entries,
            _marker: std::marker::PhantomData,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LowRankVars {
    down: Var,
    up: Var,
}

#[derive(Debug, Clone)]
struct BoundBlock {
    value: Option<LowRankVars>,
    key: Option<LowRankVars>,
}

#[derive(Debug, Clone)]
struct BoundEntry {
    position: usize,
    weight: f64,
    blocks: Vec<BoundBlock>,
}

/// Adapter weights resident on a tape, ready to be injected by the model.
#[derive(Debug, Clone)]
pub struct AdapterHook<T> {
    mode: MergeMode,
    entries: Vec<BoundEntry>,
    _marker: std::marker::PhantomData<T>,
}

fn lowrank_rows<T: Real>(tape: &mut Tape<T>, x: Var, lr: LowRankVars) -> Result<Var> {
    let at = tape.transpose(lr.down)?;
    let h = tape.matmul(x, at)?;
    let bt = tape.transpose(lr.up)?;
    Ok(tape.matmul(h, bt)?)
}

impl<T: Real> AdapterHook<T> {
    pub fn mode(&self) -> MergeMode {
        self.mode
    }

    /// Tape handles of every adapter tensor, entry by entry, in the order of
    /// [`ConceptAdapter::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for e in &self.entries {
            for b in &e.blocks {
                for lr in [b.value, b.key].into_iter().flatten() {
                    out.push(lr.down);
                    out.push(lr.up);
                }
            }
        }
        out
    }

    pub fn validate(&self, tokens: usize, blocks: usize) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.position >= tokens {
                return Err(Error::contract(format!(
                    "adapter targets token {} but the sequence has {tokens} tokens",
                    e.position
                )));
            }
            if e.blocks.len() != blocks {
                return Err(Error::contract(format!(
                    "adapter has {} blocks, model has {blocks}",
                    e.blocks.len()
                )));
            }
            if self.mode == MergeMode::TokenWise && self.entries[..i].iter().any(|o| o.position == e.position) {
                return Err(Error::contract(format!("two adapters bound to token {}", e.position)));
            }
        }
        Ok(())
    }

    /// Adds the adapter deltas for `target` at `block` to `proj` (`n × out`),
    /// computed from text features `c` (`n × d`).
    pub fn inject(&self, tape: &mut Tape<T>, proj: Var, c: Var, block: usize, target: Target) -> Result<Var> {
        let pick = |b: &BoundBlock| match target {
            Target::Key => b.key,
            Target::Value => b.value,
        };
        match self.mode {
            MergeMode::TokenWise => {
                let mut out = proj;
                for e in &self.entries {
                    let Some(lr) = pick(&e.blocks[block]) else {
                        continue;
                    };
                    let row = tape.select_rows(c, &[e.position])?;
                    let delta = lowrank_rows(tape, row, lr)?;
                    out = tape.scatter_add_rows(out, delta, &[e.position])?;
                }
                Ok(out)
            }
            MergeMode::Merged => {
                let mut total: Option<Var> = None;
                for e in &self.entries {
                    let Some(lr) = pick(&e.blocks[block]) else {
                        continue;
                    };
                    if e.weight == 0.0 {
                        continue;
                    }
                    let mut delta = lowrank_rows(tape, c, lr)?;
                    if e.weight != 1.0 {
                        delta = tape.scale(delta, T::lit(e.weight));
                    }
                    total = Some(match total {
                        Some(t) => tape.add(t, delta)?,
                        None => delta,
                    });
                }
                match total {
                    Some(t) => Ok(tape.add(proj, t)?),
                    None => Ok(proj),
                }
            }
        }
    }
}

fn apply_mode<T: Real>(
    v: &Tensor<T>,
    set: &AdapterSet<'_, T>,
    c: &Tensor<T>,
    block: usize,
    mode: MergeMode,
) -> Result<Tensor<T>> {
    let (n, _) = v.dims2("apply adapters")?;
    if c.dims2("apply adapters")?.0 != n {
        return Err(Error::contract(format!(
            "values have {n} rows, text features {}",
            c.shape()[0]
        )));
    }
    let mut tape = Tape::new();
    let vv = tape.constant(v.clone());
    let cv = tape.constant(c.clone());
    let mut hook = set.bind(&mut tape, false);
    hook.mode = mode;
    if let Some(first) = set.entries.first() {
        let blocks = first.adapter.blocks.len();
        if block >= blocks {
            return Err(Error::contract(format!("block {block} of {blocks}")));
        }
        hook.validate(n, blocks)?;
    }
    let out = hook.inject(&mut tape, vv, cv, block, Target::Value)?;
    Ok(tape.value(out).clone())
}

/// Adds each adapter's value delta to its bound row only.
pub fn apply_token_wise<T: Real>(
    v: &Tensor<T>,
    set: &AdapterSet<'_, T>,
    c: &Tensor<T>,
    block: usize,
) -> Result<Tensor<T>> {
    apply_mode(v, set, c, block, MergeMode::TokenWise)
}

/// Adds the weighted sum of all value deltas to every row.
pub fn apply_merged<T: Real>(v: &Tensor<T>, set: &AdapterSet<'_, T>, c: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    apply_mode(v, set, c, block, MergeMode::Merged)
}
