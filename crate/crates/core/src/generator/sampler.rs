//! Euler rectified-flow sampling on the integer timestep grid.

use crate::error::{invalid, Result};
use crate::generator::config::PATCH_DIM;
use crate::generator::dataset::unpatchify;
use crate::generator::dit::Generator;
use crate::numerics::{AttentionStats, BlockSparsity, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    /// `(N, P)` latent tokens.
    pub x: Tensor,
    pub t: usize,
    pub prompt: usize,
    pub cfg_scale: f64,
    pub noise_seed: u64,
}

impl LatentState {
    /// Pure noise at `t = T_max`.
    pub fn initial(gen: &Generator, prompt: usize, noise_seed: u64, cfg_scale: f64) -> Result<Self> {
        let cfg = gen.config();
        if prompt >= cfg.vocab {
            return invalid(format!("prompt {prompt} outside vocab {}", cfg.vocab));
        }
        if !(cfg_scale >= 0.0) {
            return invalid("cfg scale must be non-negative");
        }
        let mut rng = Rng::new(noise_seed);
        let x = Tensor::randn(&[cfg.tokens, PATCH_DIM], 1.0, &mut rng);
        Ok(Self { x, t: cfg.t_max, prompt, cfg_scale, noise_seed })
    }

    pub fn image(&self) -> Tensor {
        unpatchify(&self.x)
    }
}

/// `X + (tau(t_next) - tau(t)) * v`.
pub fn sampler_step(state: &LatentState, velocity: &Tensor, t_next: usize, t_max: usize) -> Result<LatentState> {
    if t_next >= state.t {
        return invalid(format!("t_next {t_next} must be below t {}", state.t));
    }
    let dt = (t_next as f32 - state.t as f32) / t_max as f32;
    let x = state.x.zip_map(velocity, |x, v| x + dt * v)?;
    x.ensure_finite("latent")?;
    Ok(LatentState { x, t: t_next, ..state.clone() })
}

/// Guided and conditioned-branch outputs of one generator call.
#[derive(Clone, Debug)]
pub struct GuidedVelocity {
    pub guided: Tensor,
    pub cond: Tensor,
    pub stats: AttentionStats,
}

/// `v_null + scale * (v_cond - v_null)`; a zero `cfg_scale` on the state
/// disables guidance and runs the conditioned branch alone.
pub fn cfg_forward(gen: &Generator, state: &LatentState, sparse: Option<&BlockSparsity>) -> Result<GuidedVelocity> {
    if state.cfg_scale == 0.0 {
        let (v, stats) = gen.velocity(&state.x, state.t, state.prompt, sparse)?;
        return Ok(GuidedVelocity { guided: v.clone(), cond: v, stats });
    }
    let cfg = gen.config();
    let n = cfg.tokens;
    let mut both = state.x.data().to_vec();
    both.extend_from_slice(state.x.data());
    let x = Tensor::new(&[2 * n, PATCH_DIM], both)?;
    let tau = cfg.tau(state.t);
    let (v, stats) = gen.velocity_batch(&x, &[tau, tau], &[state.prompt, cfg.null_class()], sparse)?;
    let half = n * PATCH_DIM;
    let cond = Tensor::new(&[n, PATCH_DIM], v.data()[..half].to_vec())?;
    let null = Tensor::new(&[n, PATCH_DIM], v.data()[half..].to_vec())?;
    let guided = combine_cfg(&cond, &null, state.cfg_scale)?;
    Ok(GuidedVelocity { guided, cond, stats })
}

pub fn combine_cfg(cond: &Tensor, null: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale >= 0.0) {
        return invalid("cfg scale must be non-negative");
    }
    let s = scale as f32;
    null.zip_map(cond, |n, c| n + s * (c - n))
}

/// Unaccelerated sampling over every integer timestep `T_max..0`.
pub fn sample_reference(gen: &Generator, prompt: usize, noise_seed: u64, cfg_scale: f64) -> Result<LatentState> {
    let mut state = LatentState::initial(gen, prompt, noise_seed, cfg_scale)?;
    let t_max = gen.config().t_max;
    while state.t > 0 {
        let v = cfg_forward(gen, &state, None)?;
        state = sampler_step(&state, &v.guided, state.t - 1, t_max)?;
    }
    Ok(state)
}

/// Sampling along an explicit decreasing schedule ending at 0.
pub fn sample_schedule(
    gen: &Generator,
    prompt: usize,
    noise_seed: u64,
    cfg_scale: f64,
    schedule: &[usize],
    sparse: Option<&BlockSparsity>,
) -> Result<LatentState> {
    let mut state = LatentState::initial(gen, prompt, noise_seed, cfg_scale)?;
    let t_max = gen.config().t_max;
    for &t_next in schedule {
        let v = cfg_forward(gen, &state, sparse)?;
        state = sampler_step(&state, &v.guided, t_next, t_max)?;
    }
    if state.t != 0 {
        return invalid("schedule does not end at t = 0");
    }
    Ok(state)
}
