//! Driving the frozen generator with a controller that picks actions.

use std::collections::BTreeSet;

use crate::accel::{cache_update, CostLedger, CostModel, ResidualCache};
use crate::error::{Error, Result};
use crate::generator::{sampler_step, Generator, LatentState};
use crate::numerics::{beta_sample, categorical_sample, Rng, Tensor};
use crate::policy::heads::{next_timestep, Choice, HeadKind, PolicyHeads};
use crate::policy::trajectory::{sum_logprobs, ActionRecord, Trajectory};

/// What a controller sees before each decision.
#[derive(Debug)]
pub struct StepContext<'a> {
    pub t: usize,
    pub t_max: usize,
    pub prompt: usize,
    pub x: &'a Tensor,
    /// Latent at the previous visited timestep.
    pub x_prev: Option<&'a Tensor>,
    pub cond: &'a Tensor,
    pub cache: &'a ResidualCache,
    /// Generator output (computed or reused) at `t`; set for the step decision.
    pub output: Option<&'a Tensor>,
}

/// A decision plus the record to append, if the controller keeps one.
pub struct Decision {
    pub value: usize,
    pub record: Option<ActionRecord>,
}

impl Decision {
    pub fn forced(value: usize) -> Self {
        Self { value, record: None }
    }
}

pub trait Controller {
    /// 1 reuses the cache, 0 computes.
    fn cache(&mut self, ctx: &StepContext) -> Result<Decision>;
    /// Sparse level, 0 dense.
    fn sparse(&mut self, ctx: &StepContext) -> Result<Decision>;
    /// Next timestep, strictly below `ctx.t`.
    fn step(&mut self, ctx: &StepContext) -> Result<Decision>;
    /// Record for the sparse head on a reuse step.
    fn skipped_sparse(&mut self) -> Option<ActionRecord> {
        None
    }
}

/// Uniform schedule, never reuse, always dense.
#[derive(Clone, Copy, Debug, Default)]
pub struct DegenerateController;

impl Controller for DegenerateController {
    fn cache(&mut self, _: &StepContext) -> Result<Decision> {
        Ok(Decision::forced(0))
    }
    fn sparse(&mut self, _: &StepContext) -> Result<Decision> {
        Ok(Decision::forced(0))
    }
    fn step(&mut self, ctx: &StepContext) -> Result<Decision> {
        Ok(Decision::forced(ctx.t - 1))
    }
}

/// Samples from the policy heads; disabled heads fall back to the
/// degenerate action and record nothing.
///
/// The first step at `T_max` always computes densely and moves to
/// `T_max - 1`, which fills the cache before any head is consulted.
pub struct PolicyController<'a> {
    pub heads: &'a PolicyHeads,
    pub rng: Rng,
    pub enabled: BTreeSet<HeadKind>,
}

impl<'a> PolicyController<'a> {
    pub fn new(heads: &'a PolicyHeads, rng: Rng, enabled: BTreeSet<HeadKind>) -> Self {
        Self { heads, rng, enabled }
    }

    pub fn all(heads: &'a PolicyHeads, rng: Rng) -> Self {
        Self::new(heads, rng, HeadKind::ALL.into_iter().collect())
    }

    fn record(&self, choice: Choice, input: &Tensor, cond: &Tensor) -> Result<ActionRecord> {
        let logprob = self.heads.logprob(&choice, input, cond)?;
        Ok(ActionRecord { choice, logprob, active: true, input: Some(input.clone()), cond: Some(cond.clone()) })
    }
}

impl Controller for PolicyController<'_> {
    fn cache(&mut self, ctx: &StepContext) -> Result<Decision> {
        if !self.enabled.contains(&HeadKind::Cache) || !ctx.cache.is_valid() {
            return Ok(Decision::forced(0));
        }
        let drift = ctx.cache.drift(ctx.x)?;
        let p = self.heads.categorical(HeadKind::Cache, &drift, ctx.cond)?;
        let i = categorical_sample(&p, &mut self.rng);
        let record = self.record(Choice::Cache(i), &drift, ctx.cond)?;
        Ok(Decision { value: i, record: Some(record) })
    }

    fn sparse(&mut self, ctx: &StepContext) -> Result<Decision> {
        if !self.enabled.contains(&HeadKind::Sparse) || ctx.t == ctx.t_max {
            return Ok(Decision::forced(0));
        }
        let p = self.heads.categorical(HeadKind::Sparse, ctx.x, ctx.cond)?;
        let i = categorical_sample(&p, &mut self.rng);
        let record = self.record(Choice::Sparse(i), ctx.x, ctx.cond)?;
        Ok(Decision { value: i, record: Some(record) })
    }

    fn step(&mut self, ctx: &StepContext) -> Result<Decision> {
        if !self.enabled.contains(&HeadKind::Step) || ctx.t == ctx.t_max {
            return Ok(Decision::forced(ctx.t - 1));
        }
        let o = ctx.output.ok_or_else(|| Error::InvalidArgument("step decision needs O_t".into()))?;
        let bp = self.heads.step_params(o, ctx.cond)?;
        let a = beta_sample(&bp, &mut self.rng)?;
        let t_next = next_timestep(ctx.t, a);
        let choice = Choice::Step { a, alpha: bp.alpha, beta: bp.beta, t: ctx.t, t_next };
        let record = self.record(choice, o, ctx.cond)?;
        Ok(Decision { value: t_next, record: Some(record) })
    }

    fn skipped_sparse(&mut self) -> Option<ActionRecord> {
        self.enabled.contains(&HeadKind::Sparse).then(|| ActionRecord::inactive(Choice::Sparse(0)))
    }
}

fn context<'a>(
    state: &'a LatentState,
    t_max: usize,
    prev: Option<&'a Tensor>,
    cond: &'a Tensor,
    cache: &'a ResidualCache,
    output: Option<&'a Tensor>,
) -> StepContext<'a> {
    StepContext { t: state.t, t_max, prompt: state.prompt, x: &state.x, x_prev: prev, cond, cache, output }
}

/// Runs one trajectory from noise at `T_max` down to `t = 0`.
pub fn rollout(
    gen: &Generator,
    prompt: usize,
    noise_seed: u64,
    cfg_scale: f64,
    cost: &CostModel,
    ctl: &mut dyn Controller,
) -> Result<Trajectory> {
    let t_max = gen.config().t_max;
    let mut state = LatentState::initial(gen, prompt, noise_seed, cfg_scale)?;
    let mut cache = ResidualCache::new();
    let mut ledger = CostLedger::new();
    let mut records = Vec::new();
    let mut timesteps = vec![state.t];
    let mut prev: Option<Tensor> = None;

    while state.t > 0 {
        let cond = gen.cond_embedding(state.t, prompt)?;
        let reuse = ctl.cache(&context(&state, t_max, prev.as_ref(), &cond, &cache, None))?;
        records.extend(reuse.record);
        let (velocity, output) = match reuse.value {
            0 => {
                let level = ctl.sparse(&context(&state, t_max, prev.as_ref(), &cond, &cache, None))?;
                records.extend(level.record);
                let sp = cost.sparse.level(level.value)?;
                let v = cache_update(gen, &state, sp.as_ref(), &mut cache)?;
                ledger.push_compute(state.t, cost.sparse_cost(level.value, &v.stats)?);
                (v.guided, v.cond)
            }
            1 => {
                records.extend(ctl.skipped_sparse());
                let v = cache.apply(&state.x)?;
                ledger.push_reuse(state.t, cost.cache_saving);
                (v.clone(), v)
            }
            other => return Err(Error::InvalidArgument(format!("cache action {other}"))),
        };
        let step = ctl.step(&context(&state, t_max, prev.as_ref(), &cond, &cache, Some(&output)))?;
        records.extend(step.record);
        prev = Some(state.x.clone());
        state = sampler_step(&state, &velocity, step.value, t_max)?;
        timesteps.push(state.t);
    }
    let logprob_old = sum_logprobs(&records);
    Ok(Trajectory {
        prompt,
        noise_seed,
        records,
        ledger,
        timesteps,
        image: state.image(),
        latent: state.x,
        logprob_old,
    })
}
