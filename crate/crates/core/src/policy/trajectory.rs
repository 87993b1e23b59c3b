use serde::{Deserialize, Serialize};

use crate::accel::CostLedger;
use crate::error::Result;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::policy::heads::{Choice, HeadKind, PolicyHeads};

/// One decision taken during a rollout, with the head inputs needed to
/// replay its log-probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub choice: Choice,
    pub logprob: f64,
    pub active: bool,
    /// Head input `(N, P)`: `O_t`, `X_t - X_cache` or `X_t`.
    #[serde(skip)]
    pub input: Option<Tensor>,
    #[serde(skip)]
    pub cond: Option<Tensor>,
}

impl ActionRecord {
    pub fn kind(&self) -> HeadKind {
        self.choice.kind()
    }

    pub fn inactive(choice: Choice) -> Self {
        Self { choice, logprob: 0.0, active: false, input: None, cond: None }
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub prompt: usize,
    pub noise_seed: u64,
    pub records: Vec<ActionRecord>,
    pub ledger: CostLedger,
    /// Timesteps visited, starting at `T_max` and ending at 0.
    pub timesteps: Vec<usize>,
    pub latent: Tensor,
    pub image: Tensor,
    pub logprob_old: f64,
}

impl Trajectory {
    pub fn step_actions(&self) -> usize {
        self.records.iter().filter(|r| r.kind() == HeadKind::Step).count()
    }

    pub fn active_records(&self) -> impl Iterator<Item = &ActionRecord> {
        self.records.iter().filter(|r| r.active)
    }
}

/// Sum of active log-probabilities, accumulated the same way the tape does.
pub fn sum_logprobs(records: &[ActionRecord]) -> f64 {
    let s: f64 = records.iter().filter(|r| r.active).map(|r| r.logprob).sum();
    s as f32 as f64
}

/// Differentiable `log pi(trajectory)` under the bound parameters.
pub fn trajectory_logprob_graph<T: Real>(
    tape: &mut Tape<T>,
    p: &crate::numerics::Bound,
    heads: &PolicyHeads,
    records: &[ActionRecord],
) -> Result<Option<Var>> {
    let mut parts = Vec::new();
    for r in records.iter().filter(|r| r.active) {
        let (Some(input), Some(cond)) = (&r.input, &r.cond) else {
            return Err(crate::Error::InvalidArgument("active record without stored head inputs".into()));
        };
        parts.push(heads.logprob_graph(tape, p, &r.choice, input, cond)?);
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let all = tape.concat(&parts)?;
    Ok(Some(tape.sum(all)))
}

/// Replays the recorded head inputs under `heads`' current parameters.
pub fn trajectory_logprob(traj: &Trajectory, heads: &PolicyHeads) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let p = heads.params().bind(&mut tape, false);
    Ok(match trajectory_logprob_graph(&mut tape, &p, heads, &traj.records)? {
        Some(v) => tape.scalar(v),
        None => 0.0,
    })
}
