//! Toy latent diffusion model: denoiser, noise schedule, sampler, training.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use denoiser::{DenoiserModel, ForwardVars, Hooks, Prediction};
pub use sampler::{cfg_combine, image_from_latent, initial_latent, latent_from_image, SampleConfig, SampleOutput};
pub use schedule::NoiseSchedule;
pub use train::{diffusion_loss, train_base, BaseTrainConfig, TrainLog};
