//! The toy diffusion transformer: adaLN-zero blocks over patch tokens.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::generator::config::{GeneratorConfig, PATCH_DIM};
use crate::numerics::{
    AttentionStats, BlockSparsity, Bound, Init, Linear, ParamId, ParamStore, Real, Rng, Tape, Tensor, Var,
};

#[derive(Clone, Debug)]
struct Block {
    /// shift/scale/gate for attention, then for the MLP.
    ada: [Linear; 6],
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_in: Linear,
    pos: ParamId,
    class: ParamId,
    blocks: Vec<Block>,
    final_shift: Linear,
    final_scale: Linear,
    out: Linear,
}

/// Velocity predictor `G(X_t, t, prompt)`.
#[derive(Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    layout: Layout,
    frozen: bool,
    block_evals: AtomicU64,
}

impl Clone for Generator {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            params: self.params.clone(),
            layout: self.layout.clone(),
            frozen: self.frozen,
            block_evals: AtomicU64::new(self.block_evals()),
        }
    }
}

/// Sinusoidal embedding of continuous times `tau` in `[0, 1]`, `(len, width)`.
pub fn timestep_embedding(taus: &[f64], width: usize) -> Tensor {
    let half = width / 2;
    let mut out = vec![0.0f32; taus.len() * width];
    for (b, &tau) in taus.iter().enumerate() {
        let pos = 1000.0 * tau;
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out[b * width + i] = (pos * freq).cos() as f32;
            out[b * width + half + i] = (pos * freq).sin() as f32;
        }
    }
    Tensor::new(&[taus.len(), width], out).expect("embedding shape")
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut ps = ParamStore::new();
        let c = config.width;
        let patch_in = Linear::new(&mut ps, "patch_in", PATCH_DIM, c, Init::Xavier, &mut rng);
        let pos = ps.add("pos", Tensor::randn(&[config.tokens, c], 0.02, &mut rng));
        let class = ps.add("class", Tensor::randn(&[config.vocab + 1, c], 0.02, &mut rng));
        let blocks = (0..config.layers)
            .map(|l| {
                let ada = std::array::from_fn(|k| {
                    Linear::new(&mut ps, &format!("block{l}.ada{k}"), c, c, Init::Zero, &mut rng)
                });
                Block {
                    ada,
                    qkv: Linear::new(&mut ps, &format!("block{l}.qkv"), c, 3 * c, Init::Xavier, &mut rng),
                    proj: Linear::new(&mut ps, &format!("block{l}.proj"), c, c, Init::Xavier, &mut rng),
                    fc1: Linear::new(&mut ps, &format!("block{l}.fc1"), c, 4 * c, Init::Xavier, &mut rng),
                    fc2: Linear::new(&mut ps, &format!("block{l}.fc2"), 4 * c, c, Init::Xavier, &mut rng),
                }
            })
            .collect();
        let final_shift = Linear::new(&mut ps, "final.shift", c, c, Init::Zero, &mut rng);
        let final_scale = Linear::new(&mut ps, "final.scale", c, c, Init::Zero, &mut rng);
        let out = Linear::new(&mut ps, "final.out", c, PATCH_DIM, Init::Zero, &mut rng);
        let layout = Layout { patch_in, pos, class, blocks, final_shift, final_scale, out };
        Ok(Self { config, params: ps, layout, frozen: false, block_evals: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access for training and loading; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Total transformer-block evaluations (one per sample per layer).
    pub fn block_evals(&self) -> u64 {
        self.block_evals.load(Ordering::Relaxed)
    }

    /// Condition vector `c_t`: timestep embedding plus class embedding.
    pub fn cond_embedding(&self, t: usize, prompt: usize) -> Result<Tensor> {
        if prompt > self.config.vocab {
            return Err(Error::InvalidArgument(format!("prompt {prompt} outside vocab")));
        }
        let c = self.config.width;
        let temb = timestep_embedding(&[self.config.tau(t)], c);
        let table = self.params.get(self.layout.class).data();
        let row = &table[prompt * c..(prompt + 1) * c];
        let data = temb.data().iter().zip(row).map(|(a, b)| a + b).collect();
        Tensor::new(&[c], data)
    }

    /// Records the network on `tape`. `x` is `(batch * N, P)`, `temb` is the
    /// constant `(batch, C)` timestep embedding.
    #[allow(clippy::too_many_arguments)]
    pub fn graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        temb: Var,
        classes: &[usize],
        sparse: Option<&BlockSparsity>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (n, batch) = (cfg.tokens, classes.len());
        if tape.shape(x) != [batch * n, PATCH_DIM] || tape.shape(temb) != [batch, cfg.width] {
            return shape_err(format!(
                "generator input {:?} / cond {:?} for batch {batch}",
                tape.shape(x),
                tape.shape(temb)
            ));
        }
        if classes.iter().any(|&k| k > cfg.vocab) {
            return Err(Error::InvalidArgument("class id outside vocab".into()));
        }
        let lay = &self.layout;
        let cls = tape.embedding(p.var(lay.class), classes)?;
        let cond = tape.add(temb, cls)?;
        let sc = tape.silu(cond);

        let h = lay.patch_in.forward(tape, p, x)?;
        let pos_ids: Vec<usize> = (0..batch * n).map(|i| i % n).collect();
        let pos = tape.embedding(p.var(lay.pos), &pos_ids)?;
        let mut h = tape.add(h, pos)?;

        for blk in &lay.blocks {
            let m: Vec<Var> = blk.ada.iter().map(|l| l.forward(tape, p, sc)).collect::<Result<_>>()?;
            let a = tape.layer_norm(h);
            let a = tape.modulate(a, m[0], m[1], n)?;
            let qkv = blk.qkv.forward(tape, p, a)?;
            let a = tape.attention(qkv, batch, n, cfg.heads, sparse)?;
            let a = blk.proj.forward(tape, p, a)?;
            let a = tape.group_mul(a, m[2], n)?;
            h = tape.add(h, a)?;

            let f = tape.layer_norm(h);
            let f = tape.modulate(f, m[3], m[4], n)?;
            let f = blk.fc1.forward(tape, p, f)?;
            let f = tape.gelu(f);
            let f = blk.fc2.forward(tape, p, f)?;
            let f = tape.group_mul(f, m[5], n)?;
            h = tape.add(h, f)?;
            self.block_evals.fetch_add(batch as u64, Ordering::Relaxed);
        }
        let shift = lay.final_shift.forward(tape, p, sc)?;
        let scale = lay.final_scale.forward(tape, p, sc)?;
        let o = tape.layer_norm(h);
        let o = tape.modulate(o, shift, scale, n)?;
        lay.out.forward(tape, p, o)
    }

    /// Binds parameters for a trainable forward; refused once frozen.
    pub fn bind_trainable<T: Real>(&self, tape: &mut Tape<T>) -> Result<Bound> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(self.params.bind(tape, true))
    }

    /// Batched frozen forward. `x` is `(batch * N, P)`; returns the velocity
    /// in the same layout together with the attention statistics.
    pub fn velocity_batch(
        &self,
        x: &Tensor,
        taus: &[f64],
        classes: &[usize],
        sparse: Option<&BlockSparsity>,
    ) -> Result<(Tensor, AttentionStats)> {
        if taus.len() != classes.len() {
            return shape_err("taus and classes differ in length");
        }
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let tv = tape.constant(&timestep_embedding(taus, self.config.width));
        let out = self.graph(&mut tape, &p, xv, tv, classes, sparse)?;
        let v = tape.tensor(out);
        v.ensure_finite("generator output")?;
        Ok((v, tape.attention_stats()))
    }

    /// Single-state forward `G(X_t, t)` with `X_t` of shape `(N, P)`.
    pub fn velocity(
        &self,
        x: &Tensor,
        t: usize,
        prompt: usize,
        sparse: Option<&BlockSparsity>,
    ) -> Result<(Tensor, AttentionStats)> {
        let n = self.config.tokens;
        if x.shape() != [n, PATCH_DIM] {
            return shape_err(format!("latent {:?}, expected [{n}, {PATCH_DIM}]", x.shape()));
        }
        self.velocity_batch(x, &[self.config.tau(t)], &[prompt], sparse)
    }
}
