//! Quality scorer, discriminator and the discounted composite reward.

pub mod buffers;
pub mod composite;
pub mod discriminator;
pub mod net;
pub mod scorer;

pub use buffers::{DiscDatasets, FifoBuffer};
pub use composite::{composite_reward, RewardBreakdown};
pub use discriminator::{balanced_batch, train_discriminator, Discriminator};
pub use net::ConvNet;
pub use scorer::{QualityScorer, ScorerTrainConfig};
