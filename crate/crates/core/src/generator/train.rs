//! Rectified-flow training of the generator.

use crate::error::{invalid, Error, Result};
use crate::generator::config::{GeneratorConfig, PATCH_DIM};
use crate::generator::dataset::{patchify, SyntheticSample};
use crate::generator::dit::{timestep_embedding, Generator};
use crate::numerics::{Rng, Tape, Tensor};
use crate::trainer::optim::{AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the label with the null class.
    pub label_dropout: f64,
    pub seed: u64,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch: 32, lr: 2e-3, label_dropout: 0.1, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GenTrainReport {
    pub losses: Vec<f64>,
}

fn lr_at(step: usize, total: usize, base: f64) -> f64 {
    let warm = 50.min(total / 10).max(1);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let p = (step - warm) as f64 / (total - warm).max(1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Trains a fresh generator on `data` and returns it frozen.
pub fn train_generator(
    data: &[SyntheticSample],
    config: GeneratorConfig,
    tc: &GenTrainConfig,
) -> Result<(Generator, GenTrainReport)> {
    if data.is_empty() {
        return invalid("empty dataset");
    }
    if tc.batch == 0 || tc.steps == 0 {
        return invalid("batch and steps must be positive");
    }
    let mut gen = Generator::new(config, tc.seed)?;
    let latents: Vec<Tensor> = data.iter().map(|s| patchify(&s.image)).collect();
    let mut rng = Rng::stream(tc.seed, 1);
    let mut opt = AdamW::new(AdamWConfig { lr: tc.lr, weight_decay: 0.0, ..Default::default() }, gen.params());
    let n = config.tokens;
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut xt = Vec::with_capacity(tc.batch * n * PATCH_DIM);
        let mut target = Vec::with_capacity(xt.capacity());
        let mut taus = Vec::with_capacity(tc.batch);
        let mut classes = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            let i = rng.below(data.len());
            let tau = rng.uniform();
            for &x0 in latents[i].data() {
                let x1 = rng.normal() as f32;
                xt.push((1.0 - tau as f32) * x0 + tau as f32 * x1);
                target.push(x1 - x0);
            }
            taus.push(tau);
            let drop = rng.uniform() < tc.label_dropout;
            classes.push(if drop { config.null_class() } else { data[i].label });
        }
        let mut tape = Tape::<f32>::new();
        let p = gen.bind_trainable(&mut tape)?;
        let x = tape.constant(&Tensor::new(&[tc.batch * n, PATCH_DIM], xt)?);
        let te = tape.constant(&timestep_embedding(&taus, config.width));
        let y = tape.constant(&Tensor::new(&[tc.batch * n, PATCH_DIM], target)?);
        let v = gen.graph(&mut tape, &p, x, te, &classes, None)?;
        let loss = tape.mse(v, y)?;
        let l = tape.scalar(loss);
        if !l.is_finite() {
            return Err(Error::Diverged(format!("generator loss {l} at step {step}")));
        }
        losses.push(l);
        let grads = p.grads(gen.params(), &tape.backward(loss)?);
        opt.config.lr = lr_at(step, tc.steps, tc.lr);
        opt.step(gen.params_mut()?, &grads)?;
    }
    gen.freeze();
    Ok((gen, GenTrainReport { losses }))
}
