//! The two-stage denoising loop.

use serde::{Deserialize, Serialize};
use tokensplit_tensor::{gaussian_kernel, Real, Tape, Tensor, Var};

use crate::adapters::AdapterSet;
use crate::analysis::{attention_entropy, iou_matrix, mean_pairwise_iou};
use crate::error::{Error, Result};
use crate::loda::afg::{afg_offset, compute_afg_masks, AFGMaskSet};
use crate::loda::aggregate::{aggregate_attention, aggregate_on_tape, check_tokens, AttentionAggregate};
use crate::loda::config::InferenceConfig;
use crate::loda::objective::{eta_schedule, kl_objective, kl_objective_on_tape};
use crate::model::{cfg_combine, initial_latent, DenoiserModel, Hooks};
use crate::text::EncodedPrompt;

/// Tape handles of the latent-optimization objective.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Vars {
    pub loss: Var,
    pub klh: Var,
    /// `(H·W × k)` aggregate the objective was computed from.
    pub aggregate: Var,
}

/// Builds the objective at latent `z` on `tape`. Only the conditional
/// branch is involved; the model and adapters enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn stage1_on_tape<T: Real>(
    model: &DenoiserModel<T>,
    tape: &mut Tape<T>,
    z: Var,
    c: &Tensor<T>,
    adapters: Option<&AdapterSet<'_, T>>,
    tokens: &[usize],
    t: usize,
    config: &InferenceConfig,
) -> Result<Stage1Vars> {
    let bound = model.params.bind(tape, false);
    let cv = tape.constant(c.clone());
    let hooks = Hooks {
        adapters: adapters.map(|s| s.bind(tape, false)),
        logit_offset: None,
    };
    let out = model.forward(tape, &bound, z, cv, t, &hooks)?;
    let aggregate = aggregate_on_tape(tape, &out.cross_maps, tokens)?;
    let kernel = gaussian_kernel::<T>(config.kernel_size, config.kernel_sigma);
    let (loss, klh) = kl_objective_on_tape(
        tape,
        aggregate,
        model.config.height,
        model.config.width,
        &kernel,
        config.kl_threshold,
    )?;
    Ok(Stage1Vars { loss, klh, aggregate })
}

/// `(loss, klh)` at `z` without gradients.
pub fn stage1_loss<T: Real>(
    model: &DenoiserModel<T>,
    z: &Tensor<T>,
    c: &Tensor<T>,
    adapters: Option<&AdapterSet<'_, T>>,
    tokens: &[usize],
    t: usize,
    config: &InferenceConfig,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let v = stage1_on_tape(model, &mut tape, zv, c, adapters, tokens, t, config)?;
    Ok((tape.value(v.loss).item().as_f64(), tape.value(v.klh).item().as_f64()))
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome<T> {
    pub latent: Tensor<T>,
    pub loss: f64,
    pub klh: f64,
    pub eta: f64,
    /// False when the loss was already zero and `latent` is the input.
    pub updated: bool,
    pub grad_norm: f64,
}

fn aggregate_columns<T: Real>(agg: &Tensor<T>) -> Vec<Vec<f64>> {
    let (rows, k) = agg.dims2("aggregate").expect("2-D aggregate");
    (0..k)
        .map(|j| (0..rows).map(|r| agg.data()[r * k + j].as_f64()).collect())
        .collect()
}

/// One gradient step `z − η·∇z` on the divergence loss. A zero loss returns
/// `z` untouched.
#[allow(clippy::too_many_arguments)]
pub fn stage1_update<T: Real>(
    model: &DenoiserModel<T>,
    z: &Tensor<T>,
    c: &Tensor<T>,
    adapters: Option<&AdapterSet<'_, T>>,
    tokens: &[usize],
    t: usize,
    eta: f64,
    config: &InferenceConfig,
    step: usize,
) -> Result<Stage1Outcome<T>> {
    let mut tape = Tape::new();
    let zv = tape.param(z.clone());
    let vars = stage1_on_tape(model, &mut tape, zv, c, adapters, tokens, t, config)?;
    let loss = tape.value(vars.loss).item().as_f64();
    let klh = tape.value(vars.klh).item().as_f64();
    let failure = |detail: String| Error::NumericFailure {
        step,
        detail,
        maps: aggregate_columns(tape.value(vars.aggregate)),
    };
    if !loss.is_finite() {
        return Err(failure(format!("divergence loss is {loss}")));
    }
    if loss == 0.0 {
        return Ok(Stage1Outcome {
            latent: z.clone(),
            loss,
            klh,
            eta,
            updated: false,
            grad_norm: 0.0,
        });
    }
    let grad = tape.backward(vars.loss)?.wrt(zv);
    if !grad.is_finite() {
        return Err(failure("latent gradient is not finite".into()));
    }
    let grad_norm = grad.data().iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
    let step_size = T::lit(eta);
    let latent = z.zip_map(&grad, "stage1_update", |zi, gi| zi - step_size * gi)?;
    Ok(Stage1Outcome {
        latent,
        loss,
        klh,
        eta,
        updated: true,
        grad_norm,
    })
}

/// Per-step record written to the diagnostics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: usize,
    /// Latent optimization ran at this step.
    pub stage1: bool,
    /// The latent actually moved.
    pub updated: bool,
    /// Guidance offsets were applied at this step.
    pub afg: bool,
    pub eta: Option<f64>,
    /// Objective before the latent update.
    pub stage1_klh: Option<f64>,
    pub stage1_loss: Option<f64>,
    /// Objective on the maps that produced this step's noise prediction.
    pub klh: Option<f64>,
    pub kl_loss: Option<f64>,
    /// Softmax entropy per selected token.
    pub entropy: Vec<f64>,
    pub mask_counts: Vec<usize>,
    /// Masked cell indices per selected token.
    pub masks: Vec<Vec<usize>>,
    pub iou: Vec<Vec<f64>>,
    /// Overlap of the masks that drove the guidance offsets.
    pub guidance_iou: Option<f64>,
    /// Aggregated maps per token, row-major cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maps: Option<Vec<Vec<f64>>>,
}

impl StepDiagnostics {
    pub fn mask_bools(&self, cells: usize) -> Vec<Vec<bool>> {
        self.masks
            .iter()
            .map(|idx| {
                let mut m = vec![false; cells];
                for &i in idx {
                    m[i] = true;
                }
                m
            })
            .collect()
    }

    /// Mean IoU over token pairs of this step's masks.
    pub fn mean_iou(&self) -> f64 {
        let k = self.iou.len();
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..k {
            for j in i + 1..k {
                total += self.iou[i][j];
                pairs += 1;
            }
        }
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct LodaOutput<T> {
    pub latent: Tensor<T>,
    pub tokens: Vec<usize>,
    pub words: Vec<String>,
    pub steps: Vec<StepDiagnostics>,
}

impl<T> LodaOutput<T> {
    /// Pairwise mask IoU at the last step.
    pub fn final_iou(&self) -> f64 {
        self.steps.last().map_or(0.0, StepDiagnostics::mean_iou)
    }

    pub fn final_masks_nonempty(&self) -> bool {
        self.steps
            .last()
            .is_some_and(|s| !s.mask_counts.is_empty() && s.mask_counts.iter().all(|&c| c > 0))
    }
}

fn step_record<T: Real>(
    aggregate: &AttentionAggregate<T>,
    config: &InferenceConfig,
    kernel: &[f64],
) -> Result<StepDiagnostics> {
    let slices = aggregate.slices();
    let masks = compute_afg_masks(aggregate, config.percentile, kernel)?;
    let objective = (slices.len() >= 2)
        .then(|| kl_objective(&slices, kernel, config.kl_threshold))
        .transpose()?;
    Ok(StepDiagnostics {
        step: 0,
        t: aggregate.t,
        stage1: false,
        updated: false,
        afg: false,
        eta: None,
        stage1_klh: None,
        stage1_loss: None,
        klh: objective.as_ref().map(|o| o.klh),
        kl_loss: objective.as_ref().map(|o| o.loss),
        entropy: slices.iter().map(attention_entropy).collect(),
        mask_counts: masks.counts(),
        masks: (0..masks.k()).map(|i| masks.cells(i)).collect(),
        iou: iou_matrix(&masks.masks)?,
        guidance_iou: None,
        maps: config
            .record_maps
            .then(|| slices.iter().map(|s| s.data().to_vec()).collect()),
    })
}

/// Guidance masks from a probe forward at the current latent.
#[allow(clippy::too_many_arguments)]
fn probe_masks<T: Real>(
    model: &DenoiserModel<T>,
    z: &Tensor<T>,
    c: &Tensor<T>,
    adapters: Option<&AdapterSet<'_, T>>,
    prompt: &EncodedPrompt,
    tokens: &[usize],
    t: usize,
    config: &InferenceConfig,
    kernel: &[f64],
) -> Result<AFGMaskSet> {
    let probe = model.predict(z, c, t, adapters, None)?;
    let agg = aggregate_attention(&probe.cross_maps, tokens, prompt, &model.config, t)?;
    compute_afg_masks(&agg, config.percentile, kernel)
}

/// Samples from `config.seed`: latent optimization on the first
/// `stage1_steps` steps, guidance offsets on the rest.
pub fn loda_sample<T: Real>(
    model: &DenoiserModel<T>,
    prompt: &EncodedPrompt,
    tokens: &[usize],
    adapters: Option<&AdapterSet<'_, T>>,
    config: &InferenceConfig,
) -> Result<LodaOutput<T>> {
    config.validate(model.config.train_timesteps)?;
    check_tokens(tokens, prompt)?;
    if config.stage1 && config.stage1_steps > 0 && tokens.len() < 2 {
        return Err(Error::contract(format!(
            "latent optimization needs at least 2 selected tokens, got {}",
            tokens.len()
        )));
    }
    let c = model.text_features(prompt)?;
    let null = model.text_features(&model.embedder().null_prompt())?;
    let kernel = gaussian_kernel::<f64>(config.kernel_size, config.kernel_sigma);
    let ts = model.schedule.timesteps(config.steps);
    let total = model.config.train_timesteps as f64;
    let mut z = initial_latent::<T>(&model.config, config.seed);
    let mut steps = Vec::with_capacity(ts.len());
    for (k, &t) in ts.iter().enumerate() {
        let in_stage1 = k < config.stage1_steps;
        let mut stage1 = None;
        if config.stage1 && in_stage1 {
            let eta = eta_schedule(t as f64, total, config.eta_base, config.eta_slope);
            let out = stage1_update(model, &z, &c, adapters, tokens, t, eta, config, k)?;
            z = out.latent.clone();
            stage1 = Some(out);
        }
        let guidance = if config.afg && !in_stage1 && !tokens.is_empty() {
            Some(probe_masks(
                model, &z, &c, adapters, prompt, tokens, t, config, &kernel,
            )?)
        } else {
            None
        };
        let offset = guidance
            .as_ref()
            .map(|m| afg_offset::<T>(m, model.config.max_tokens, config.amplify, config.suppress))
            .transpose()?;
        let cond = model.predict(&z, &c, t, adapters, offset.as_ref())?;
        let eps = if config.guidance == 1.0 {
            cond.eps.clone()
        } else {
            let uncond = model.predict(&z, &null, t, None, None)?;
            cfg_combine(&uncond.eps, &cond.eps, config.guidance)?
        };
        if !eps.is_finite() {
            return Err(Error::NumericFailure {
                step: k,
                detail: "noise prediction is not finite".into(),
                maps: Vec::new(),
            });
        }
        let mut record = if tokens.is_empty() {
            StepDiagnostics {
                step: k,
                t,
                stage1: false,
                updated: false,
                afg: false,
                eta: None,
                stage1_klh: None,
                stage1_loss: None,
                klh: None,
                kl_loss: None,
                entropy: Vec::new(),
                mask_counts: Vec::new(),
                masks: Vec::new(),
                iou: Vec::new(),
                guidance_iou: None,
                maps: None,
            }
        } else {
            let agg = aggregate_attention(&cond.cross_maps, tokens, prompt, &model.config, t)?;
            step_record(&agg, config, &kernel)?
        };
        record.step = k;
        record.afg = guidance.is_some();
        record.guidance_iou = guidance.as_ref().map(|g| mean_pairwise_iou(&g.masks)).transpose()?;
        if let Some(s) = &stage1 {
            record.stage1 = true;
            record.updated = s.updated;
            record.eta = Some(s.eta);
            record.stage1_klh = Some(s.klh);
            record.stage1_loss = Some(s.loss);
        }
        steps.push(record);
        z = model.schedule.ddim_step(&z, &eps, t, ts.get(k + 1).copied())?;
    }
    Ok(LodaOutput {
        latent: z,
        tokens: tokens.to_vec(),
        words: tokens.iter().map(|&i| prompt.words[i].clone()).collect(),
        steps,
    })
}
