//! Equivalent-step accounting.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub t: usize,
    pub computed: bool,
    pub c_cache: f64,
    pub c_sparse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub records: Vec<StepCost>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_compute(&mut self, t: usize, c_sparse: f64) {
        self.records.push(StepCost { t, computed: true, c_cache: 0.0, c_sparse });
    }

    pub fn push_reuse(&mut self, t: usize, c_cache: f64) {
        self.records.push(StepCost { t, computed: false, c_cache, c_sparse: 0.0 });
    }

    pub fn k_step(&self) -> usize {
        self.records.len()
    }

    pub fn reuse_steps(&self) -> usize {
        self.records.iter().filter(|r| !r.computed).count()
    }

    pub fn sparse_steps(&self) -> usize {
        self.records.iter().filter(|r| r.computed && r.c_sparse > 0.0).count()
    }

    pub fn equivalent_steps(&self) -> Result<(f64, usize)> {
        equivalent_steps(&self.records)
    }
}

/// Half away from zero, never below 1.
pub fn round_k(k: f64) -> usize {
    (k.round() as usize).max(1)
}

/// `K = sum_k (1 - C_cache_k)(1 - C_sparse_k)` and its rounding.
pub fn equivalent_steps(records: &[StepCost]) -> Result<(f64, usize)> {
    if records.is_empty() {
        return invalid("empty cost ledger");
    }
    let k: f64 = records.iter().map(|r| (1.0 - r.c_cache) * (1.0 - r.c_sparse)).sum();
    Ok((k, round_k(k)))
}
