//! Few-shot adapter training against a frozen base model.

use serde::{Deserialize, Serialize};
use tokensplit_tensor::{Real, Tape, Tensor, Var};

use crate::adapters::adapter::{ConceptAdapter, Variant};
use crate::adapters::apply::AdapterSet;
use crate::error::{Error, Result};
use crate::model::train::{diffusion_loss, fixed_draws};
use crate::model::{latent_from_image, DenoiserModel, Hooks};
use crate::optim::Adam;
use crate::rng::SplitMix64;
use crate::text::{fill_template, PROMPT_TEMPLATES};

pub const MIN_CONCEPT_IMAGES: usize = 3;
const EVAL_STREAM: u64 = 0xE7A1;
const EVAL_DRAWS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterTrainConfig {
    pub iters: usize,
    pub lr: f64,
    pub rank: usize,
    pub batch: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Required for key-modifying variants.
    pub allow_ablation: bool,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        AdapterTrainConfig {
            iters: 300,
            lr: 5e-3,
            rank: 8,
            batch: 2,
            seed: 0,
            variant: Variant::Value,
            allow_ablation: false,
        }
    }
}

impl AdapterTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant.is_ablation() && !self.allow_ablation {
            return Err(Error::AblationGuard(self.variant.to_string()));
        }
        if self.rank == 0 {
            return Err(Error::config("adapter.rank", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("adapter.batch", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("adapter.lr", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterTrainLog {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Loss of one example with `adapter` bound to `word` in `caption`.
#[allow(clippy::too_many_arguments)]
fn example_loss<T: Real>(
    model: &DenoiserModel<T>,
    adapter: &ConceptAdapter<T>,
    tape: &mut Tape<T>,
    trainable: bool,
    caption: &[String],
    x0: &Tensor<T>,
    t: usize,
    noise: &Tensor<T>,
) -> Result<(Var, Vec<Var>)> {
    let prompt = model.embedder().tokenize(caption)?;
    let mut set = AdapterSet::token_wise();
    set.push(adapter, prompt.position(&adapter.word)?);
    let bound = model.params.bind(tape, false);
    let hook = set.bind(tape, trainable);
    let vars = hook.vars();
    let c = tape.constant(model.text_features(&prompt)?);
    let hooks = Hooks {
        adapters: Some(hook),
        logit_offset: None,
    };
    let loss = diffusion_loss(model, tape, &bound, x0, c, t, noise, &hooks)?;
    Ok((loss, vars))
}

/// Mean loss over the concept set at fixed draws, captioned by the first
/// template.
pub fn concept_loss<T: Real>(
    model: &DenoiserModel<T>,
    adapter: &ConceptAdapter<T>,
    images: &[Tensor<f64>],
    seed: u64,
) -> Result<f64> {
    let caption = fill_template(PROMPT_TEMPLATES[0], &adapter.word);
    let draws = fixed_draws(model, seed ^ EVAL_STREAM, images.len() * EVAL_DRAWS);
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        let x0 = latent_from_image::<T>(img);
        for (t, noise) in &draws[i * EVAL_DRAWS..(i + 1) * EVAL_DRAWS] {
            let mut tape = Tape::new();
            let (loss, _) = example_loss(model, adapter, &mut tape, false, &caption, &x0, *t, noise)?;
            total += tape.value(loss).item().as_f64();
        }
    }
    Ok(total / (images.len() * EVAL_DRAWS).max(1) as f64)
}

/// Trains a fresh adapter for `word` on `images`. The base model is only
/// borrowed, so its weights cannot change.
pub fn train_adapter<T: Real>(
    model: &DenoiserModel<T>,
    images: &[Tensor<f64>],
    name: &str,
    word: &str,
    config: &AdapterTrainConfig,
) -> Result<(ConceptAdapter<T>, AdapterTrainLog)> {
    config.validate()?;
    if images.len() < MIN_CONCEPT_IMAGES {
        return Err(Error::config(
            "concept_images",
            format!("need at least {MIN_CONCEPT_IMAGES} images, got {}", images.len()),
        ));
    }
    model.vocab.id(word)?;
    let mut adapter = ConceptAdapter::fresh(name, word, config.variant, config.rank, &model.config, config.seed);
    let initial_loss = concept_loss(model, &adapter, images, config.seed)?;
    let latents: Vec<Tensor<T>> = images.iter().map(latent_from_image).collect();
    let shapes: Vec<Tensor<T>> = adapter.tensors_mut().into_iter().map(|t| t.clone()).collect();
    let mut opt = Adam::new(config.lr, &shapes);
    let shape = model.config.latent_shape();
    let mut losses = Vec::with_capacity(config.iters);
    for iter in 0..config.iters {
        let caption = fill_template(PROMPT_TEMPLATES[iter % PROMPT_TEMPLATES.len()], word);
        let mut rng = SplitMix64::stream(config.seed, iter as u64);
        let mut tape = Tape::new();
        let mut total: Option<Var> = None;
        let mut vars = Vec::new();
        // every batch element shares the adapter, so gradients are summed
        // over the per-element copies
        let mut copies = Vec::new();
        for _ in 0..config.batch {
            let i = rng.below(latents.len() as u64) as usize;
            let t = rng.below(model.config.train_timesteps as u64) as usize;
            let noise = Tensor::from_vec(
                &shape,
                (0..shape.iter().product()).map(|_| T::lit(rng.normal())).collect(),
            )?;
            let (l, v) = example_loss(model, &adapter, &mut tape, true, &caption, &latents[i], t, &noise)?;
            copies.push(v);
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let loss = tape.scale(total.expect("batch is nonempty"), T::lit(1.0 / config.batch as f64));
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: iter,
                loss: value,
            });
        }
        let grads = tape.backward(loss)?;
        for (k, _) in copies[0].iter().enumerate() {
            let mut g = grads.wrt(copies[0][k]);
            for copy in &copies[1..] {
                g = g.add(&grads.wrt(copy[k]))?;
            }
            vars.push(g);
        }
        let mut params = adapter.tensors_mut();
        let mut owned: Vec<Tensor<T>> = params.iter().map(|t| (*t).clone()).collect();
        opt.update(&mut owned, &vars);
        for (slot, new) in params.iter_mut().zip(owned) {
            **slot = new;
        }
        losses.push(value);
    }
    let final_loss = concept_loss(model, &adapter, images, config.seed)?;
    adapter.info.iterations = config.iters;
    adapter.info.initial_loss = Some(initial_loss);
    adapter.info.final_loss = Some(final_loss);
    Ok((
        adapter,
        AdapterTrainLog {
            losses,
            initial_loss,
            final_loss,
        },
    ))
}
