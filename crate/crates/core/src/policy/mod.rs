//! Step, cache and sparse policy heads and rollouts.

pub mod heads;
pub mod rollout;
pub mod trajectory;

pub use heads::{next_timestep, Choice, HeadConfig, HeadKind, PolicyHeads};
pub use rollout::{rollout, Controller, Decision, DegenerateController, PolicyController, StepContext};
pub use trajectory::{sum_logprobs, trajectory_logprob, trajectory_logprob_graph, ActionRecord, Trajectory};
