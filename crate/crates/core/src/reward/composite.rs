use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub q: f64,
    pub d: f64,
    pub k_rounded: usize,
    pub lambda: f64,
    pub omega: f64,
    pub r: f64,
}

/// `r = (q + omega d)(1 - lambda^K) / (K (1 - lambda))`.
pub fn composite_reward(q: f64, d: f64, k_rounded: usize, lambda: f64, omega: f64) -> Result<RewardBreakdown> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return invalid(format!("lambda {lambda} outside (0, 1)"));
    }
    if k_rounded == 0 {
        return invalid("K must be at least 1");
    }
    let k = k_rounded as f64;
    let r = (q + omega * d) * (1.0 - lambda.powi(k_rounded as i32)) / (k * (1.0 - lambda));
    Ok(RewardBreakdown { q, d, k_rounded, lambda, omega, r })
}
