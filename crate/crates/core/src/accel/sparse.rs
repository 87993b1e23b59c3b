//! Candidate block-sparsity levels and their cost.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::generator::GeneratorConfig;
use crate::numerics::{AttentionStats, BlockSparsity, Tape, Tensor};

pub const SPARSE_BLOCK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityCandidates {
    /// `(zeta1, zeta2)` per level, level 1 first.
    pub levels: Vec<(f64, f64)>,
    pub nominal_costs: Vec<f64>,
    pub block: usize,
}

impl Default for SparsityCandidates {
    fn default() -> Self {
        Self {
            levels: vec![(0.07, 0.08), (0.10, 0.11), (0.20, 0.21)],
            nominal_costs: vec![0.05, 0.07, 0.10],
            block: SPARSE_BLOCK,
        }
    }
}

impl SparsityCandidates {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.levels.is_empty() || self.levels.len() != self.nominal_costs.len() {
            return bad("need one nominal cost per sparse level");
        }
        for w in self.levels.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return bad("sparse thresholds must increase strictly across levels");
            }
        }
        if self.levels.iter().any(|&(a, b)| !(a >= 0.0 && b >= 0.0 && a <= 1.0 && b <= 1.0)) {
            return bad("sparse thresholds must lie in [0, 1]");
        }
        if self.nominal_costs.iter().any(|&c| !(0.0..1.0).contains(&c)) {
            return bad("sparse costs must lie in [0, 1)");
        }
        if self.block == 0 {
            return bad("sparse block size must be positive");
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Thresholds for `level` in `1..=num_levels`; level 0 is dense.
    pub fn level(&self, level: usize) -> Result<Option<BlockSparsity>> {
        if level == 0 {
            return Ok(None);
        }
        let &(zeta1, zeta2) =
            self.levels.get(level - 1).ok_or_else(|| Error::InvalidArgument(format!("sparse level {level}")))?;
        Ok(Some(BlockSparsity { zeta1, zeta2, block: self.block }))
    }

    pub fn nominal_cost(&self, level: usize) -> Result<f64> {
        if level == 0 {
            return Ok(0.0);
        }
        self.nominal_costs
            .get(level - 1)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("sparse level {level}")))
    }
}

/// Standalone multi-head attention over `qkv (N, 3C)` at a candidate level.
pub fn sparse_attention(
    qkv: &Tensor,
    heads: usize,
    level: usize,
    candidates: &SparsityCandidates,
) -> Result<(Tensor, AttentionStats)> {
    if qkv.shape().len() != 2 {
        return shape_err("qkv must be (tokens, 3 * width)");
    }
    let sp = candidates.level(level)?;
    let mut tape = Tape::<f32>::new();
    let q = tape.constant(qkv);
    let out = tape.attention(q, 1, qkv.shape()[0], heads, sp.as_ref())?;
    Ok((tape.tensor(out), tape.attention_stats()))
}

/// Fraction of one transformer block's multiply-adds spent in the
/// score and value products of attention.
pub fn attention_share(cfg: &GeneratorConfig) -> f64 {
    let (n, c) = (cfg.tokens as f64, cfg.width as f64);
    let attn = 2.0 * n * n * c;
    let linear = n * (3.0 * c * c + c * c + 8.0 * c * c);
    attn / (attn + linear)
}

/// `min(skipped * share, nominal cap)`.
pub fn measure_sparse_cost(
    level: usize,
    skipped_fraction: f64,
    share: f64,
    candidates: &SparsityCandidates,
) -> Result<f64> {
    let cap = candidates.nominal_cost(level)?;
    if !(0.0..=1.0).contains(&skipped_fraction) {
        return invalid(format!("skipped fraction {skipped_fraction}"));
    }
    Ok((skipped_fraction * share).min(cap))
}
