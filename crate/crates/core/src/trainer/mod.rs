//! Group rollouts, advantages, the clipped surrogate and the adversarial loop.

pub mod advantages;
pub mod algorithm;
pub mod objective;
pub mod optim;

pub use advantages::{grpo_advantages, rloo_advantages, AdvantageMode};
pub use algorithm::*;
pub use objective::{clipped_term, grpo_objective_graph, SurrogateStats};
pub use optim::{AdamW, AdamWConfig};
