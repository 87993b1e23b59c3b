use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const STD_GUARD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageMode {
    Grpo,
    Rloo,
}

impl AdvantageMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "grpo" => Some(Self::Grpo),
            "rloo" => Some(Self::Rloo),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Grpo => "grpo",
            Self::Rloo => "rloo",
        }
    }

    pub fn compute(self, rewards: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Grpo => grpo_advantages(rewards),
            Self::Rloo => rloo_advantages(rewards),
        }
    }
}

/// `(r - mean) / std` with the population standard deviation; a group of
/// equal rewards gets all-zero advantages.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return invalid("group size must be at least 2");
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_GUARD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `r_i - mean_{j != i} r_j`.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return invalid("group size must be at least 2");
    }
    let n = rewards.len() as f64;
    let total: f64 = rewards.iter().sum();
    Ok(rewards.iter().map(|r| r - (total - r) / (n - 1.0)).collect())
}
