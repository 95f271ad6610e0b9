//! Noise-prediction training of the base denoiser.

use serde::{Deserialize, Serialize};
use tokensplit_tensor::{Real, Tape, Tensor, Var};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::denoiser::{DenoiserModel, Hooks};
use crate::model::sampler::latent_from_image;
use crate::params::BoundParams;
use crate::rng::SplitMix64;
use crate::text::EncodedPrompt;

const HELDOUT_STREAM: u64 = 0x4E1D;
const HELDOUT_DRAWS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    /// Steps to run in this call; a resumed checkpoint continues its count.
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Probability of replacing a caption by the null prompt.
    pub caption_drop: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            steps: 2000,
            lr: 2e-3,
            batch: 4,
            seed: 0,
            caption_drop: 0.1,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive and finite"));
        }
        if !(0.0..=1.0).contains(&self.caption_drop) {
            return Err(Error::config("train.caption_drop", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub start_step: u64,
    pub end_step: u64,
    pub losses: Vec<f64>,
    pub heldout_before: f64,
    pub heldout_after: f64,
}

/// Mean squared noise-prediction error of one example on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<T: Real>(
    model: &DenoiserModel<T>,
    tape: &mut Tape<T>,
    bound: &BoundParams,
    x0: &Tensor<T>,
    c: Var,
    t: usize,
    noise: &Tensor<T>,
    hooks: &Hooks<T>,
) -> Result<Var> {
    let zt = model.schedule.add_noise(x0, noise, t)?;
    let z = tape.constant(zt);
    let out = model.forward(tape, bound, z, c, t, hooks)?;
    let target = tape.constant(noise.clone());
    let diff = tape.sub(out.eps, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, T::lit(1.0 / noise.numel() as f64)))
}

/// Draws `(t, noise)` pairs for the fixed held-out evaluation.
pub(crate) fn fixed_draws<T: Real>(model: &DenoiserModel<T>, seed: u64, count: usize) -> Vec<(usize, Tensor<T>)> {
    let shape = model.config.latent_shape();
    (0..count)
        .map(|i| {
            let mut rng = SplitMix64::stream(seed, i as u64);
            let t = rng.below(model.config.train_timesteps as u64) as usize;
            let noise = Tensor::from_vec(
                &shape,
                (0..shape.iter().product()).map(|_| T::lit(rng.normal())).collect(),
            )
            .expect("latent shape");
            (t, noise)
        })
        .collect()
}

/// Mean loss on `examples` at fixed timesteps and noise.
pub fn heldout_loss<T: Real>(model: &DenoiserModel<T>, examples: &[Example], seed: u64) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let draws = fixed_draws(model, seed ^ HELDOUT_STREAM, examples.len() * HELDOUT_DRAWS);
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let prompt = model.embedder().tokenize(&ex.caption)?;
        let c = model.text_features(&prompt)?;
        let x0 = latent_from_image::<T>(&ex.image);
        for (t, noise) in &draws[i * HELDOUT_DRAWS..(i + 1) * HELDOUT_DRAWS] {
            let z = model.schedule.add_noise(&x0, noise, *t)?;
            let eps = model.predict(&z, &c, *t, None, None)?.eps;
            total += eps.cast::<f64>().sub(&noise.cast::<f64>())?.map(|d| d * d).sum() / noise.numel() as f64;
        }
    }
    Ok(total / (examples.len() * HELDOUT_DRAWS) as f64)
}

/// Runs `config.steps` Adam steps on `checkpoint`, continuing its step count.
/// Each step draws its batch from the stream `(seed, step)`, so a run split
/// across resumes matches an uninterrupted one.
pub fn train_base<T: Real>(
    checkpoint: &mut Checkpoint<T>,
    data: &[Example],
    heldout: &[Example],
    config: &BaseTrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    if data.is_empty() && config.steps > 0 {
        return Err(Error::config("dataset", "training set is empty"));
    }
    let model = &mut checkpoint.model;
    let embedder = model.embedder();
    let prompts = data
        .iter()
        .map(|ex| embedder.tokenize(&ex.caption))
        .collect::<Result<Vec<EncodedPrompt>>>()?;
    let null = embedder.null_prompt();
    let images: Vec<Tensor<T>> = data.iter().map(|ex| latent_from_image(&ex.image)).collect();
    let heldout_before = heldout_loss(model, heldout, config.seed)?;
    checkpoint.optimizer.lr = config.lr;
    let start = checkpoint.step;
    let shape = model.config.latent_shape();
    let mut losses = Vec::with_capacity(config.steps);
    for step in start..start + config.steps as u64 {
        let mut rng = SplitMix64::stream(config.seed, step);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true);
        let mut total: Option<Var> = None;
        for _ in 0..config.batch {
            let i = rng.below(data.len() as u64) as usize;
            let prompt = if rng.chance(config.caption_drop) {
                &null
            } else {
                &prompts[i]
            };
            let t = rng.below(model.config.train_timesteps as u64) as usize;
            let noise = Tensor::from_vec(
                &shape,
                (0..shape.iter().product()).map(|_| T::lit(rng.normal())).collect(),
            )?;
            let c = model.text_features_on(&mut tape, &bound, prompt)?;
            let l = diffusion_loss(model, &mut tape, &bound, &images[i], c, t, &noise, &Hooks::none())?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let loss = tape.scale(total.expect("batch is nonempty"), T::lit(1.0 / config.batch as f64));
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: step as usize,
                loss: value,
            });
        }
        let mut grads = tape.backward(loss)?;
        let g = bound.gradients(&mut grads);
        checkpoint.optimizer.update(model.params.tensors_mut(), &g);
        checkpoint.step = step + 1;
        losses.push(value);
    }
    let heldout_after = heldout_loss(model, heldout, config.seed)?;
    Ok(TrainLog {
        start_step: start,
        end_step: checkpoint.step,
        losses,
        heldout_before,
        heldout_after,
    })
}
