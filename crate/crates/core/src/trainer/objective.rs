//! Clipped group-relative surrogate.

use crate::error::{invalid, Result};
use crate::numerics::{Bound, Real, Tape, Var};
use crate::policy::{trajectory_logprob_graph, PolicyHeads, Trajectory};

/// `min(phi A, clip(phi, 1 - eps, 1 + eps) A)`.
pub fn clipped_term(phi: f64, advantage: f64, eps: f64) -> f64 {
    (phi * advantage).min(phi.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SurrogateStats {
    pub mean_ratio: f64,
    /// Fraction of samples whose clipped branch was strictly lower.
    pub clip_frac: f64,
}

/// Loss `-J`, averaged over all trajectories.
pub fn grpo_objective_graph<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    heads: &PolicyHeads,
    trajs: &[&Trajectory],
    advantages: &[f64],
    eps: f64,
) -> Result<(Var, SurrogateStats)> {
    if trajs.is_empty() || trajs.len() != advantages.len() {
        return invalid("one advantage per trajectory required");
    }
    if !(eps > 0.0 && eps < 1.0) {
        return invalid(format!("clip range {eps} outside (0, 1)"));
    }
    let mut terms = Vec::with_capacity(trajs.len());
    let mut stats = SurrogateStats::default();
    for (traj, &adv) in trajs.iter().zip(advantages) {
        let lp = match trajectory_logprob_graph(tape, p, heads, &traj.records)? {
            Some(v) => v,
            None => tape.leaf_values(&[1], vec![T::zero()], false)?,
        };
        let diff = tape.add_scalar(lp, -traj.logprob_old);
        let phi = tape.exp(diff);
        let unclipped = tape.scale(phi, adv);
        let c = tape.clamp(phi, 1.0 - eps, 1.0 + eps);
        let clipped = tape.scale(c, adv);
        let phi_v = tape.scalar(phi);
        if tape.scalar(clipped) < tape.scalar(unclipped) {
            stats.clip_frac += 1.0;
        }
        stats.mean_ratio += phi_v;
        terms.push(tape.minimum(unclipped, clipped)?);
    }
    let n = trajs.len() as f64;
    stats.clip_frac /= n;
    stats.mean_ratio /= n;
    let all = tape.concat(&terms)?;
    let loss = tape.weighted_sum(all, &vec![-1.0 / n; trajs.len()])?;
    Ok((loss, stats))
}
