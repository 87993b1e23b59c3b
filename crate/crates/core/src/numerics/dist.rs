//! The two action distributions the policy heads emit.

use crate::error::{invalid, Result};
use crate::numerics::special::ln_beta;
use crate::numerics::Rng;

/// Floor applied to categorical log-masses.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return invalid(format!("Beta parameters must be positive, got ({alpha}, {beta})"));
        }
        Ok(Self { alpha, beta })
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }
}

/// Draw from Beta(α, β) as `X / (X + Y)` with `X ~ Γ(α)`, `Y ~ Γ(β)`.
/// The result lies strictly inside `(0, 1)`.
pub fn beta_sample(p: &BetaParams, rng: &mut Rng) -> Result<f64> {
    BetaParams::new(p.alpha, p.beta)?;
    let x = rng.gamma(p.alpha);
    let y = rng.gamma(p.beta);
    let a = x / (x + y);
    Ok(a.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
}

pub fn beta_logprob(p: &BetaParams, a: f64) -> Result<f64> {
    BetaParams::new(p.alpha, p.beta)?;
    if !(a > 0.0 && a < 1.0) {
        return invalid(format!("Beta support is (0, 1), got {a}"));
    }
    Ok((p.alpha - 1.0) * a.ln() + (p.beta - 1.0) * (1.0 - a).ln() - ln_beta(p.alpha, p.beta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalParams {
    probs: Vec<f64>,
}

impl CategoricalParams {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return invalid("empty categorical");
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return invalid(format!("negative or non-finite probability in {probs:?}"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return invalid(format!("probabilities sum to {total}"));
        }
        Ok(Self { probs })
    }

    /// Softmax of raw logits, computed in 64-bit.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        Self::new(exps.into_iter().map(|e| e / z).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Inverse-CDF draw.
pub fn categorical_sample(p: &CategoricalParams, rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &q) in p.probs.iter().enumerate() {
        if q > 0.0 {
            last_positive = i;
        }
        acc += q;
        if u < acc && q > 0.0 {
            return i;
        }
    }
    // rounding left a sliver above the final cumulative sum
    last_positive
}

pub fn categorical_logprob(p: &CategoricalParams, index: usize) -> Result<f64> {
    match p.probs.get(index) {
        Some(&q) => Ok(if q > 0.0 { q.ln().max(LOG_PROB_FLOOR) } else { LOG_PROB_FLOOR }),
        None => invalid(format!("index {index} out of range for {} categories", p.probs.len())),
    }
}
