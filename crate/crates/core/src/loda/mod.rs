//! Disentangling inference: latent optimization on pairwise attention
//! divergence during the first steps, then attention fixing guidance.

mod afg;
mod aggregate;
mod config;
mod objective;
mod sample;

pub use afg::{afg_offset, apply_afg, compute_afg_masks, percentile_threshold, AFGMaskSet};
pub use aggregate::{aggregate_attention, aggregate_on_tape, AttentionAggregate};
pub use config::InferenceConfig;
pub use objective::{
    eta_schedule, harmonic_mean, kl_loss, kl_objective, kl_objective_on_tape, pairwise_kl, smooth_and_normalize,
    KlObjective, TokenDistribution, EPS_FLOOR,
};
pub use sample::{
    loda_sample, stage1_loss, stage1_on_tape, stage1_update, LodaOutput, Stage1Outcome, Stage1Vars, StepDiagnostics,
};
