//! Latent diffusion: schedule, lossless latent codec, toy denoiser,
//! training objective, DDIM sampling and checkpoints.

mod checkpoint;
mod denoiser;
mod latent;
mod sampler;
mod schedule;
mod train;

pub use checkpoint::{
    decode_blobs, decode_checkpoint, encode_blobs, encode_checkpoint, load_checkpoint,
    save_checkpoint, Blob, Checkpoint, CHANNEL_ORDER, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use denoiser::{
    encode_pose, ldm_loss, ConditioningBundle, CorrelationMode, DenoiserConfig, LossItem,
    NoisePredictor, ParamVars, PoseEncoderParams, ToyDenoiser,
};
pub use latent::{LatentImage, ToyAutoencoder};
pub use sampler::{ddim_sample, ddim_sample_from, ddim_step, ddim_timesteps, initial_noise};
pub use schedule::{forward_noising, NoiseSchedule, TERMINAL_ANGLE_FRACTION};
pub use train::{smooth_trace, train, AdamState, Stage, TrainConfig, TrainingSubject};
