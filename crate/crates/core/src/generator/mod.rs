//! The frozen toy diffusion transformer and its sampler.

pub mod config;
pub mod dataset;
pub mod dit;
pub mod sampler;
pub mod train;

pub use config::{GeneratorConfig, IMAGE_SIDE, PATCH, PATCH_DIM};
pub use dataset::{gen_dataset, load_dataset, patchify, render, save_dataset, unpatchify, SyntheticSample};
pub use dit::{timestep_embedding, Generator};
pub use sampler::{cfg_forward, combine_cfg, sample_reference, sample_schedule, sampler_step, GuidedVelocity, LatentState};
pub use train::{train_generator, GenTrainConfig, GenTrainReport};
