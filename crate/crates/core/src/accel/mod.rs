//! Step execution, residual caching, block-sparse attention and cost accounting.

pub mod cache;
pub mod ledger;
pub mod sparse;

use serde::{Deserialize, Serialize};

pub use cache::{cache_apply, cache_update, ResidualCache};
pub use ledger::{equivalent_steps, round_k, CostLedger, StepCost};
pub use sparse::{attention_share, measure_sparse_cost, sparse_attention, SparsityCandidates, SPARSE_BLOCK};

use crate::error::{Error, Result};
use crate::numerics::AttentionStats;

/// Cost constants used by rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub cache_saving: f64,
    pub sparse: SparsityCandidates,
    /// Replace nominal sparse costs by `skipped * attention_share`.
    pub measure: bool,
    pub attention_share: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            cache_saving: 0.95,
            sparse: SparsityCandidates::default(),
            measure: false,
            attention_share: attention_share(&crate::generator::GeneratorConfig::default()),
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cache_saving) {
            return Err(Error::Config("cache saving must lie in [0, 1)".into()));
        }
        self.sparse.validate()
    }

    pub fn sparse_cost(&self, level: usize, stats: &AttentionStats) -> Result<f64> {
        if self.measure && level > 0 {
            measure_sparse_cost(level, stats.skipped_fraction(), self.attention_share, &self.sparse)
        } else {
            self.sparse.nominal_cost(level)
        }
    }
}
