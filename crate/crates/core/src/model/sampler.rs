//! Plain DDIM sampling with classifier-free guidance.

use serde::{Deserialize, Serialize};
use tokensplit_tensor::{Real, Tensor};

use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::loda::{aggregate_attention, AttentionAggregate};
use crate::model::denoiser::DenoiserModel;
use crate::model::ModelConfig;
use crate::rng::SplitMix64;
use crate::text::EncodedPrompt;

const LATENT_STREAM: u64 = 0x2A7E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    /// Keep the aggregated cross-attention of every step.
    pub record_attention: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 50,
            guidance: 7.5,
            seed: 0,
            record_attention: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput<T> {
    pub latent: Tensor<T>,
    /// Per-step aggregates over all non-pad tokens, when recorded.
    pub history: Vec<AttentionAggregate<T>>,
}

/// Standard-normal starting latent for `seed`.
pub fn initial_latent<T: Real>(config: &ModelConfig, seed: u64) -> Tensor<T> {
    let shape = config.latent_shape();
    let mut rng = SplitMix64::stream(seed, LATENT_STREAM);
    let data = (0..config.cells() * config.channels)
        .map(|_| T::lit(rng.normal()))
        .collect();
    Tensor::from_vec(&shape, data).expect("latent shape")
}

/// Guided prediction `uncond + w·(cond − uncond)`. `w = 1` and `w = 0`
/// return the respective branch exactly.
pub fn cfg_combine<T: Real>(uncond: &Tensor<T>, cond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if w == 1.0 {
        return Ok(cond.clone());
    }
    if w == 0.0 {
        return Ok(uncond.clone());
    }
    let w = T::lit(w);
    Ok(uncond.zip_map(cond, "cfg", |u, c| u + w * (c - u))?)
}

/// Maps pixel values in `[0, 1]` to the model's `[-1, 1]` data range.
pub fn latent_from_image<T: Real>(image: &Tensor<f64>) -> Tensor<T> {
    image.map(|v| 2.0 * v - 1.0).cast()
}

pub fn image_from_latent<T: Real>(latent: &Tensor<T>) -> Tensor<f64> {
    latent.cast::<f64>().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

pub(crate) fn prompt_tokens(prompt: &EncodedPrompt) -> Vec<usize> {
    (0..prompt.len()).collect()
}

impl<T: Real> DenoiserModel<T> {
    /// DDIM trajectory from the seed's initial latent. Adapters act on the
    /// conditional branch only.
    pub fn sample(
        &self,
        prompt: &EncodedPrompt,
        adapters: Option<&AdapterSet<'_, T>>,
        config: &SampleConfig,
    ) -> Result<SampleOutput<T>> {
        if config.steps == 0 || config.steps > self.config.train_timesteps {
            return Err(Error::config(
                "sample.steps",
                format!("must be in 1..={}", self.config.train_timesteps),
            ));
        }
        let c = self.text_features(prompt)?;
        let null = self.text_features(&self.embedder().null_prompt())?;
        let tokens = prompt_tokens(prompt);
        let ts = self.schedule.timesteps(config.steps);
        let mut z = initial_latent::<T>(&self.config, config.seed);
        let mut history = Vec::new();
        for (k, &t) in ts.iter().enumerate() {
            let cond = self.predict(&z, &c, t, adapters, None)?;
            let eps = if config.guidance == 1.0 {
                cond.eps.clone()
            } else {
                let uncond = self.predict(&z, &null, t, None, None)?;
                cfg_combine(&uncond.eps, &cond.eps, config.guidance)?
            };
            if config.record_attention && !tokens.is_empty() {
                history.push(aggregate_attention(&cond.cross_maps, &tokens, prompt, &self.config, t)?);
            }
            z = self.schedule.ddim_step(&z, &eps, t, ts.get(k + 1).copied())?;
        }
        Ok(SampleOutput { latent: z, history })
    }
}
