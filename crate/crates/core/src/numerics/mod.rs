//! Tensors, autodiff, sampling and special functions.

pub mod attention;
pub mod dist;
pub mod layers;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod special;
pub mod tape;
pub mod tensor;

pub use attention::{AttentionStats, BlockSparsity};
pub use dist::{
    beta_logprob, beta_sample, categorical_logprob, categorical_sample, BetaParams, CategoricalParams,
    LOG_PROB_FLOOR,
};
pub use layers::{Conv2d, Init, Linear};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::{mix_seed, Rng};
pub use scalar::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
