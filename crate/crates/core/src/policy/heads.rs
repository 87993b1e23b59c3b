//! Conv + AdaLN + mean-pool + linear policy heads.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::generator::{GeneratorConfig, PATCH_DIM};
use crate::numerics::{
    BetaParams, Bound, CategoricalParams, Conv2d, Init, Linear, ParamStore, Real, Rng, Tape, Tensor, Var,
    LOG_PROB_FLOOR,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HeadKind {
    Step,
    Cache,
    Sparse,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Step, HeadKind::Cache, HeadKind::Sparse];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Step => "step",
            HeadKind::Cache => "cache",
            HeadKind::Sparse => "sparse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Channels per token of the head input.
    pub in_dim: usize,
    /// Tokens per side of the grid.
    pub grid: usize,
    /// Width of the condition vector `c_t`.
    pub cond_width: usize,
    /// Hidden conv channels.
    pub channels: usize,
    pub n_sparse: usize,
}

impl HeadConfig {
    pub fn for_generator(g: &GeneratorConfig, n_sparse: usize) -> Self {
        Self { in_dim: PATCH_DIM, grid: g.grid(), cond_width: g.width, channels: 8, n_sparse }
    }

    pub fn outputs(&self, kind: HeadKind) -> usize {
        match kind {
            HeadKind::Step | HeadKind::Cache => 2,
            HeadKind::Sparse => 1 + self.n_sparse,
        }
    }

    /// Parameter count of all three heads, without building them.
    pub fn param_count(&self) -> usize {
        let ch = self.channels;
        let per = |out: usize| {
            (self.in_dim * 9 * ch + ch) + 2 * (self.cond_width * ch + ch) + (ch * out + out)
        };
        HeadKind::ALL.iter().map(|&k| per(self.outputs(k))).sum()
    }
}

#[derive(Clone, Debug)]
struct Head {
    conv: Conv2d,
    shift: Linear,
    scale: Linear,
    out: Linear,
}

/// The three policy heads and their parameters.
#[derive(Clone, Debug)]
pub struct PolicyHeads {
    config: HeadConfig,
    params: ParamStore,
    heads: [Head; 3],
}

fn index(kind: HeadKind) -> usize {
    kind as usize
}

impl PolicyHeads {
    pub fn new(config: HeadConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut ps = ParamStore::new();
        let heads = HeadKind::ALL.map(|kind| {
            let n = kind.name();
            let ch = config.channels;
            Head {
                conv: Conv2d::new(&mut ps, &format!("{n}.conv"), config.in_dim, ch, 3, Init::Xavier, &mut rng),
                shift: Linear::new(&mut ps, &format!("{n}.shift"), config.cond_width, ch, Init::Normal(0.02), &mut rng),
                scale: Linear::new(&mut ps, &format!("{n}.scale"), config.cond_width, ch, Init::Normal(0.02), &mut rng),
                out: Linear::new(&mut ps, &format!("{n}.out"), ch, config.outputs(kind), Init::Zero, &mut rng),
            }
        });
        Self { config, params: ps, heads }
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Which head each parameter tensor belongs to, in store order.
    pub fn owner(&self, kind: HeadKind) -> Vec<bool> {
        let prefix = format!("{}.", kind.name());
        self.params.names().iter().map(|n| n.starts_with(&prefix)).collect()
    }

    /// Raw head outputs `(1, outputs)` for one state. `input` is `(N, in_dim)`
    /// token-major, `cond` is `(cond_width)`.
    pub fn graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        kind: HeadKind,
        input: &Tensor,
        cond: &Tensor,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = cfg.grid * cfg.grid;
        if input.shape() != [n, cfg.in_dim] || cond.len() != cfg.cond_width {
            return shape_err(format!("head input {:?}, cond {:?}", input.shape(), cond.shape()));
        }
        let h = &self.heads[index(kind)];
        // token-major (N, P) to NCHW (1, P, g, g)
        let d = input.data();
        let mut chw = vec![0.0f32; n * cfg.in_dim];
        for tok in 0..n {
            for c in 0..cfg.in_dim {
                chw[c * n + tok] = d[tok * cfg.in_dim + c];
            }
        }
        let x = tape.constant(&Tensor::new(&[1, cfg.in_dim, cfg.grid, cfg.grid], chw)?);
        let c = tape.constant(&Tensor::new(&[1, cfg.cond_width], cond.data().to_vec())?);
        let f = h.conv.forward(tape, p, x)?;
        let f = tape.reshape(f, &[cfg.channels, n])?;
        let f = tape.transpose(f)?;
        let f = tape.layer_norm(f);
        let sc = tape.silu(c);
        let shift = h.shift.forward(tape, p, sc)?;
        let scale = h.scale.forward(tape, p, sc)?;
        let f = tape.modulate(f, shift, scale, n)?;
        let f = tape.silu(f);
        let pooled = tape.mean_rows(f, n)?;
        h.out.forward(tape, p, pooled)
    }

    /// `alpha, beta = softplus(u) + 1`, as a `(1, 2)` node.
    pub fn beta_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        o_t: &Tensor,
        cond: &Tensor,
    ) -> Result<Var> {
        let u = self.graph(tape, p, HeadKind::Step, o_t, cond)?;
        let s = tape.softplus(u);
        Ok(tape.add_scalar(s, 1.0))
    }

    /// Log-probability node of one recorded action.
    pub fn logprob_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        choice: &Choice,
        input: &Tensor,
        cond: &Tensor,
    ) -> Result<Var> {
        match *choice {
            Choice::Step { a, .. } => {
                let ab = self.beta_graph(tape, p, input, cond)?;
                let alpha = tape.column(ab, 0)?;
                let beta = tape.column(ab, 1)?;
                tape.beta_logprob(alpha, beta, &[a])
            }
            Choice::Cache(i) | Choice::Sparse(i) => {
                let kind = if matches!(choice, Choice::Cache(_)) { HeadKind::Cache } else { HeadKind::Sparse };
                let logits = self.graph(tape, p, kind, input, cond)?;
                let lp = tape.log_softmax(logits);
                tape.pick(lp, &[i], LOG_PROB_FLOOR)
            }
        }
    }

    pub fn step_params(&self, o_t: &Tensor, cond: &Tensor) -> Result<BetaParams> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let ab = self.beta_graph(&mut tape, &p, o_t, cond)?;
        let v = tape.value(ab);
        BetaParams::new(v[0] as f64, v[1] as f64)
    }

    pub fn categorical(&self, kind: HeadKind, input: &Tensor, cond: &Tensor) -> Result<CategoricalParams> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let logits = self.graph(&mut tape, &p, kind, input, cond)?;
        let l: Vec<f64> = tape.value(logits).iter().map(|&x| x as f64).collect();
        CategoricalParams::from_logits(&l)
    }

    /// Log-probability of `choice` as evaluated during rollout; replaying
    /// with unchanged parameters reproduces it bit for bit.
    pub fn logprob(&self, choice: &Choice, input: &Tensor, cond: &Tensor) -> Result<f64> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let lp = self.logprob_graph(&mut tape, &p, choice, input, cond)?;
        Ok(tape.scalar(lp))
    }
}

/// A sampled (or forced) action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Choice {
    Step { a: f64, alpha: f64, beta: f64, t: usize, t_next: usize },
    Cache(usize),
    Sparse(usize),
}

impl Choice {
    pub fn kind(&self) -> HeadKind {
        match self {
            Choice::Step { .. } => HeadKind::Step,
            Choice::Cache(_) => HeadKind::Cache,
            Choice::Sparse(_) => HeadKind::Sparse,
        }
    }
}

/// `min(floor(t * a), t - 1)`.
pub fn next_timestep(t: usize, a: f64) -> usize {
    debug_assert!(t >= 1);
    ((t as f64 * a).floor().max(0.0) as usize).min(t - 1)
}
