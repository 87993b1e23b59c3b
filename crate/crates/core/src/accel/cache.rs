//! Whole-model residual cache: `O_t ~= X_t + (G(X_c, t_c) - X_c)`.

use crate::error::{shape_err, Error, Result};
use crate::generator::{cfg_forward, Generator, GuidedVelocity, LatentState};
use crate::numerics::{BlockSparsity, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResidualCache {
    delta: Option<Tensor>,
    x_cache: Option<Tensor>,
    t_cache: usize,
}

impl ResidualCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_valid(&self) -> bool {
        self.delta.is_some()
    }

    pub fn t_cache(&self) -> Option<usize> {
        self.is_valid().then_some(self.t_cache)
    }

    pub fn delta(&self) -> Option<&Tensor> {
        self.delta.as_ref()
    }

    pub fn x_cache(&self) -> Option<&Tensor> {
        self.x_cache.as_ref()
    }

    /// Stores `output - x` taken at timestep `t`.
    pub fn store(&mut self, x: &Tensor, t: usize, output: &Tensor) -> Result<()> {
        self.delta = Some(output.sub(x)?);
        self.x_cache = Some(x.clone());
        self.t_cache = t;
        Ok(())
    }

    /// `x + delta`, without touching the generator.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.delta.as_ref().ok_or(Error::InvalidCache)?;
        if d.shape() != x.shape() {
            return shape_err(format!("cached delta {:?} vs latent {:?}", d.shape(), x.shape()));
        }
        x.add(d)
    }

    /// `X_t - X_cache`, the cache head's input.
    pub fn drift(&self, x: &Tensor) -> Result<Tensor> {
        x.sub(self.x_cache.as_ref().ok_or(Error::InvalidCache)?)
    }
}

/// Runs the generator at `state` (optionally sparse) and refreshes `cache`
/// with the guided output.
pub fn cache_update(
    gen: &Generator,
    state: &LatentState,
    sparse: Option<&BlockSparsity>,
    cache: &mut ResidualCache,
) -> Result<GuidedVelocity> {
    let v = cfg_forward(gen, state, sparse)?;
    cache.store(&state.x, state.t, &v.guided)?;
    Ok(v)
}

pub fn cache_apply(state: &LatentState, cache: &ResidualCache) -> Result<Tensor> {
    cache.apply(&state.x)
}
