//! Percentile masks and the logit offsets that pin each token to its own
//! region.

use serde::{Deserialize, Serialize};
use tokensplit_tensor::{blur_2d, Real, Tensor};

use crate::error::{Error, Result};
use crate::loda::aggregate::AttentionAggregate;

/// Binary region per selected token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AFGMaskSet {
    pub height: usize,
    pub width: usize,
    /// Prompt positions of the masked tokens.
    pub tokens: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// Row-major `H·W` cells per token.
    pub masks: Vec<Vec<bool>>,
}

impl AFGMaskSet {
    pub fn k(&self) -> usize {
        self.tokens.len()
    }

    pub fn count(&self, i: usize) -> usize {
        self.masks[i].iter().filter(|&&b| b).count()
    }

    pub fn counts(&self) -> Vec<usize> {
        (0..self.k()).map(|i| self.count(i)).collect()
    }

    /// Indices of the cells set in mask `i`.
    pub fn cells(&self, i: usize) -> Vec<usize> {
        self.masks[i]
            .iter()
            .enumerate()
            .filter_map(|(c, &b)| b.then_some(c))
            .collect()
    }
}

/// Nearest-rank percentile: the `max(1, ⌈γ·N⌉)`-th smallest value.
pub fn percentile_threshold(values: &[f64], gamma: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("percentile of an empty map"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::config(
            "inference.percentile",
            format!("must lie in [0, 1), got {gamma}"),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((gamma * values.len() as f64).ceil() as usize).max(1);
    Ok(sorted[rank - 1])
}

/// Blurs each slice of `aggregate` and keeps cells at or above its
/// percentile threshold.
pub fn compute_afg_masks<T: Real>(aggregate: &AttentionAggregate<T>, gamma: f64, kernel: &[f64]) -> Result<AFGMaskSet> {
    let (h, w) = (aggregate.height(), aggregate.width());
    let mut thresholds = Vec::with_capacity(aggregate.k());
    let mut masks = Vec::with_capacity(aggregate.k());
    for j in 0..aggregate.k() {
        let smoothed = blur_2d(aggregate.slice(j).data(), h, w, kernel);
        let theta = percentile_threshold(&smoothed, gamma)?;
        masks.push(smoothed.iter().map(|&v| v >= theta).collect());
        thresholds.push(theta);
    }
    Ok(AFGMaskSet {
        height: h,
        width: w,
        tokens: aggregate.tokens.clone(),
        thresholds,
        masks,
    })
}

/// `(H·W × n)` additive logit offset: column of token `i` gets `amplify` on
/// its own mask and `suppress` for every other token's mask covering the
/// cell. Columns of unmasked tokens stay zero.
pub fn afg_offset<T: Real>(masks: &AFGMaskSet, tokens: usize, amplify: f64, suppress: f64) -> Result<Tensor<T>> {
    let cells = masks.height * masks.width;
    let mut out = vec![T::zero(); cells * tokens];
    for (i, &col) in masks.tokens.iter().enumerate() {
        if col >= tokens {
            return Err(Error::contract(format!("masked token {col} outside {tokens} tokens")));
        }
        for cell in 0..cells {
            let own = if masks.masks[i][cell] { amplify } else { 0.0 };
            let others = masks
                .masks
                .iter()
                .enumerate()
                .filter(|&(j, m)| j != i && m[cell])
                .count() as f64;
            out[cell * tokens + col] = T::lit(own + suppress * others);
        }
    }
    Ok(Tensor::from_vec(&[cells, tokens], out)?)
}

/// Adds the offset to pre-softmax logits `(H·W × n)`.
pub fn apply_afg<T: Real>(logits: &Tensor<T>, masks: &AFGMaskSet, amplify: f64, suppress: f64) -> Result<Tensor<T>> {
    let (rows, n) = logits.dims2("apply_afg")?;
    if rows != masks.height * masks.width {
        return Err(Error::contract(format!(
            "masks are {}×{} but logits have {rows} query cells",
            masks.height, masks.width
        )));
    }
    if masks.k() == 0 {
        return Ok(logits.clone());
    }
    Ok(logits.add(&afg_offset(masks, n, amplify, suppress)?)?)
}
