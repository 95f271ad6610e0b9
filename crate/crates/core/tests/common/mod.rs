#![allow(dead_code)]

use tokensplit::adapters::{ConceptAdapter, Variant};
use tokensplit::model::{DenoiserModel, ModelConfig};
use tokensplit::rng::SplitMix64;
use tokensplit::tensor::{Real, Tensor};

/// 8×8 RGB+texture grid with narrow layers; fast enough for exhaustive
/// checks while keeping the default image channel layout.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 8,
        channels: 4,
        model_dim: 8,
        text_dim: 8,
        attn_dim: 8,
        value_dim: 8,
        heads: 2,
        blocks: 2,
        ff_mult: 2,
        max_tokens: 16,
        train_timesteps: 20,
    }
}

pub fn small_model<T: Real>(seed: u64) -> DenoiserModel<T> {
    DenoiserModel::new(small_config(), seed).expect("valid config")
}

pub fn normal_tensor<T: Real>(rng: &mut SplitMix64, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.normal() * std)).collect()).expect("shape")
}

/// Adapter whose up-projections are random, so its delta is nonzero.
pub fn active_adapter<T: Real>(
    config: &ModelConfig,
    name: &str,
    word: &str,
    variant: Variant,
    seed: u64,
) -> ConceptAdapter<T> {
    let mut a = ConceptAdapter::fresh(name, word, variant, 2, config, seed);
    let mut rng = SplitMix64::stream(seed, 0x0F);
    for blk in &mut a.blocks {
        for lr in [&mut blk.value, &mut blk.key].into_iter().flatten() {
            lr.up = normal_tensor(&mut rng, lr.up.shape(), 0.5);
        }
    }
    a
}

pub fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b)
}
