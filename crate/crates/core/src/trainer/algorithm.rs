//! Alternating discriminator / policy training.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accel::CostModel;
use crate::error::{invalid, Error, Result};
use crate::generator::{sample_reference, Generator};
use crate::numerics::{mix_seed, Rng, Tape, Tensor};
use crate::policy::{rollout, HeadKind, PolicyController, PolicyHeads, Trajectory};
use crate::reward::{composite_reward, train_discriminator, DiscDatasets, Discriminator, QualityScorer, RewardBreakdown};
use crate::trainer::advantages::AdvantageMode;
use crate::trainer::objective::grpo_objective_graph;
use crate::trainer::optim::{AdamW, AdamWConfig};

pub const METRICS_HEADER: &str = "round,iter,mean_reward,mean_q,mean_d,mean_K,mean_Kstep,clip_frac,disc_loss";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub prompts_per_iter: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_eps: f64,
    pub lambda: f64,
    pub omega: f64,
    /// Added to the quality score inside the reward only.
    pub q_offset: f64,
    pub advantage_mode: AdvantageMode,
    pub disc_steps_per_round: usize,
    pub policy_iters_per_round: usize,
    pub total_rounds: usize,
    pub disc_lr: f64,
    pub disc_batch: usize,
    pub origin_size: usize,
    pub accele_capacity: usize,
    pub accele_init: usize,
    pub shared_noise: bool,
    pub cfg_scale: f64,
    pub enabled: BTreeSet<HeadKind>,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            prompts_per_iter: 32,
            lr: 1e-5,
            weight_decay: 0.1,
            clip_eps: 0.2,
            lambda: 0.97,
            omega: 1.0,
            q_offset: 1.0,
            advantage_mode: AdvantageMode::Grpo,
            disc_steps_per_round: 100,
            policy_iters_per_round: 50,
            total_rounds: 4,
            disc_lr: 1e-3,
            disc_batch: 64,
            origin_size: 1024,
            accele_capacity: 2048,
            accele_init: 256,
            shared_noise: false,
            cfg_scale: 0.0,
            enabled: HeadKind::ALL.into_iter().collect(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad("lambda must lie in (0, 1)");
        }
        if self.omega < 0.0 || !self.omega.is_finite() {
            return bad("omega must be non-negative");
        }
        if self.prompts_per_iter == 0 || self.disc_batch == 0 || self.origin_size == 0 || self.accele_capacity == 0 {
            return bad("batch and dataset sizes must be positive");
        }
        if self.enabled.is_empty() {
            return bad("at least one policy head must be enabled");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(self.disc_lr > 0.0) {
            return bad("learning rates must be positive and weight decay non-negative");
        }
        Ok(())
    }
}

/// Frozen pieces every rollout needs.
#[derive(Clone, Copy)]
pub struct Env<'a> {
    pub gen: &'a Generator,
    pub scorer: &'a QualityScorer,
    pub cost: &'a CostModel,
}

#[derive(Clone, Debug)]
pub struct GroupRollout {
    pub prompt: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardBreakdown>,
    /// Unshifted quality scores.
    pub q_raw: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterMetrics {
    pub round: usize,
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_q: f64,
    pub mean_d: f64,
    pub mean_k: f64,
    pub mean_kstep: f64,
    pub clip_frac: f64,
    pub mean_ratio: f64,
    pub loss: f64,
    /// Gradient L2 norm per head, in `HeadKind::ALL` order.
    pub grad_norm: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub iters: usize,
    pub mean_reward: f64,
    pub mean_q: f64,
    pub mean_d: f64,
    pub mean_k: f64,
    pub mean_kstep: f64,
    pub clip_frac: f64,
    pub disc_loss: f64,
    /// Step-count histogram over the round's trajectories.
    pub kstep_hist: Vec<usize>,
}

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.round,
            self.iters,
            self.mean_reward,
            self.mean_q,
            self.mean_d,
            self.mean_k,
            self.mean_kstep,
            self.clip_frac,
            self.disc_loss
        )
    }
}

pub struct TrainOutcome {
    pub heads: PolicyHeads,
    pub disc: Discriminator,
    pub datasets: DiscDatasets,
    pub rounds: Vec<RoundMetrics>,
    pub iters: Vec<IterMetrics>,
}

/// Unaccelerated samples for the positive set.
pub fn build_origin(gen: &Generator, n: usize, cfg_scale: f64, seed: u64) -> Result<Vec<Tensor>> {
    let vocab = gen.config().vocab;
    (0..n)
        .into_par_iter()
        .map(|i| Ok(sample_reference(gen, i % vocab, mix_seed(seed, i as u64), cfg_scale)?.image()))
        .collect()
}

/// `G` rollouts for `prompt` under the current heads, scored and ranked.
pub fn rollout_group(
    env: Env,
    heads: &PolicyHeads,
    disc: &Discriminator,
    cfg: &TrainerConfig,
    prompt: usize,
    seed: u64,
) -> Result<GroupRollout> {
    let shared = mix_seed(seed, u64::MAX);
    let trajectories: Vec<Trajectory> = (0..cfg.group_size as u64)
        .into_par_iter()
        .map(|g| {
            let noise = if cfg.shared_noise { shared } else { mix_seed(seed, 2 * g) };
            let rng = Rng::new(mix_seed(seed, 2 * g + 1));
            let mut ctl = PolicyController::new(heads, rng, cfg.enabled.clone());
            rollout(env.gen, prompt, noise, cfg.cfg_scale, env.cost, &mut ctl)
        })
        .collect::<Result<_>>()?;
    let images: Vec<&Tensor> = trajectories.iter().map(|t| &t.image).collect();
    let q_raw = env.scorer.score_batch(&images, &vec![prompt; images.len()])?;
    let d = disc.score_batch(&images)?;
    let mut rewards = Vec::with_capacity(images.len());
    for (i, t) in trajectories.iter().enumerate() {
        let (_, k) = t.ledger.equivalent_steps()?;
        rewards.push(composite_reward(q_raw[i] + cfg.q_offset, d[i], k, cfg.lambda, cfg.omega)?);
    }
    let r: Vec<f64> = rewards.iter().map(|b| b.r).collect();
    let advantages = cfg.advantage_mode.compute(&r)?;
    Ok(GroupRollout { prompt, trajectories, rewards, q_raw, advantages })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Stateful runner of the adversarial loop.
pub struct PolicyTrainer<'a> {
    pub env: Env<'a>,
    pub config: TrainerConfig,
    pub heads: PolicyHeads,
    pub disc: Discriminator,
    pub datasets: Option<DiscDatasets>,
    opt: AdamW,
    rng: Rng,
    mask: Vec<bool>,
    pub rounds: Vec<RoundMetrics>,
    pub iters: Vec<IterMetrics>,
}

impl<'a> PolicyTrainer<'a> {
    pub fn new(env: Env<'a>, config: TrainerConfig, heads: PolicyHeads, origin: Option<Vec<Tensor>>) -> Result<Self> {
        config.validate()?;
        if !env.gen.is_frozen() {
            return invalid("policy training needs a frozen generator");
        }
        let disc = Discriminator::new(mix_seed(config.seed, 11), config.disc_lr, config.disc_batch);
        let opt = AdamW::new(
            AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..Default::default() },
            heads.params(),
        );
        let mut mask = vec![false; heads.params().len()];
        for k in &config.enabled {
            for (m, o) in mask.iter_mut().zip(heads.owner(*k)) {
                *m |= o;
            }
        }
        let datasets = origin.map(|o| DiscDatasets::new(o, config.accele_capacity));
        let rng = Rng::stream(config.seed, 7);
        Ok(Self { env, config, heads, disc, datasets, opt, rng, mask, rounds: Vec::new(), iters: Vec::new() })
    }

    fn ensure_datasets(&mut self) -> Result<()> {
        let cfg = &self.config;
        if self.datasets.is_none() {
            let origin = build_origin(self.env.gen, cfg.origin_size, cfg.cfg_scale, mix_seed(cfg.seed, 101))?;
            self.datasets = Some(DiscDatasets::new(origin, cfg.accele_capacity));
        }
        if self.datasets.as_ref().is_some_and(|d| d.accele().is_empty()) {
            let vocab = self.env.gen.config().vocab;
            let n = cfg.accele_init.max(1);
            let base = mix_seed(cfg.seed, 202);
            let heads = &self.heads;
            let env = self.env;
            let imgs: Vec<Tensor> = (0..n as u64)
                .into_par_iter()
                .map(|i| {
                    let mut ctl = PolicyController::new(heads, Rng::new(mix_seed(base, 2 * i + 1)), cfg.enabled.clone());
                    let t = rollout(env.gen, i as usize % vocab, mix_seed(base, 2 * i), cfg.cfg_scale, env.cost, &mut ctl)?;
                    Ok(t.image)
                })
                .collect::<Result<_>>()?;
            self.datasets.as_mut().unwrap().push_accele(imgs);
        }
        Ok(())
    }

    /// One policy update over `prompts_per_iter` groups.
    pub fn iteration(&mut self, round: usize, iter: usize) -> Result<(IterMetrics, Vec<GroupRollout>)> {
        let vocab = self.env.gen.config().vocab;
        let cfg = self.config.clone();
        let seeds: Vec<(usize, u64)> =
            (0..cfg.prompts_per_iter).map(|_| (self.rng.below(vocab), self.rng.next_u64())).collect();
        let groups: Vec<GroupRollout> = seeds
            .iter()
            .map(|&(prompt, seed)| rollout_group(self.env, &self.heads, &self.disc, &cfg, prompt, seed))
            .collect::<Result<_>>()?;
        let trajs: Vec<&Trajectory> = groups.iter().flat_map(|g| g.trajectories.iter()).collect();
        let advs: Vec<f64> = groups.iter().flat_map(|g| g.advantages.iter().copied()).collect();

        let mut tape = Tape::<f32>::new();
        let p = self.heads.params().bind(&mut tape, true);
        let (loss, stats) = grpo_objective_graph(&mut tape, &p, &self.heads, &trajs, &advs, cfg.clip_eps)?;
        let loss_v = tape.scalar(loss);
        let mut grads = p.grads(self.heads.params(), &tape.backward(loss)?);
        for (g, &m) in grads.iter_mut().zip(&self.mask) {
            if !m {
                *g = Tensor::zeros(g.shape());
            }
        }
        let mut grad_norm = [0.0; 3];
        for (k, kind) in HeadKind::ALL.iter().enumerate() {
            let own = self.heads.owner(*kind);
            grad_norm[k] = grads.iter().zip(own).filter(|(_, o)| *o).map(|(g, _)| g.sq_norm()).sum::<f64>().sqrt();
        }
        self.opt.step_masked(self.heads.params_mut(), &grads, Some(&self.mask))?;
        if !self.heads.params().is_finite() || !loss_v.is_finite() {
            return Err(Error::Diverged(format!("policy parameters non-finite at round {round} iter {iter}")));
        }
        if let Some(ds) = self.datasets.as_mut() {
            ds.push_accele(trajs.iter().map(|t| t.image.clone()));
        }
        let all = || groups.iter().flat_map(|g| g.rewards.iter());
        let metrics = IterMetrics {
            round,
            iter,
            mean_reward: mean(all().map(|r| r.r)),
            mean_q: mean(groups.iter().flat_map(|g| g.q_raw.iter().copied())),
            mean_d: mean(all().map(|r| r.d)),
            mean_k: mean(trajs.iter().map(|t| t.ledger.equivalent_steps().map(|k| k.0).unwrap_or(0.0))),
            mean_kstep: mean(trajs.iter().map(|t| t.ledger.k_step() as f64)),
            clip_frac: stats.clip_frac,
            mean_ratio: stats.mean_ratio,
            loss: loss_v,
            grad_norm,
        };
        Ok((metrics, groups))
    }

    /// Discriminator phase followed by the policy phase.
    pub fn round(&mut self, round: usize) -> Result<RoundMetrics> {
        self.ensure_datasets()?;
        let steps = self.config.disc_steps_per_round;
        let disc_loss = train_discriminator(&mut self.disc, self.datasets.as_ref().unwrap(), steps, &mut self.rng)?;
        let mut its = Vec::new();
        let mut ksteps = Vec::new();
        for i in 0..self.config.policy_iters_per_round {
            let (m, groups) = self.iteration(round, i)?;
            ksteps.extend(groups.iter().flat_map(|g| g.trajectories.iter().map(|t| t.ledger.k_step())));
            its.push(m);
        }
        let r = RoundMetrics {
            round,
            iters: its.len(),
            mean_reward: mean(its.iter().map(|m| m.mean_reward)),
            mean_q: mean(its.iter().map(|m| m.mean_q)),
            mean_d: mean(its.iter().map(|m| m.mean_d)),
            mean_k: mean(its.iter().map(|m| m.mean_k)),
            mean_kstep: mean(its.iter().map(|m| m.mean_kstep)),
            clip_frac: mean(its.iter().map(|m| m.clip_frac)),
            disc_loss,
            kstep_hist: crate::harness::histogram::bin_counts(&ksteps),
        };
        self.iters.extend(its);
        self.rounds.push(r.clone());
        Ok(r)
    }

    pub fn run(mut self, mut metrics: Option<&mut dyn Write>) -> Result<TrainOutcome> {
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(w, "{METRICS_HEADER}")?;
        }
        for r in 0..self.config.total_rounds {
            let m = self.round(r)?;
            if let Some(w) = metrics.as_deref_mut() {
                writeln!(w, "{}", m.csv_row())?;
            }
        }
        let datasets = match self.datasets {
            Some(d) => d,
            None => return invalid("no training rounds were run"),
        };
        Ok(TrainOutcome { heads: self.heads, disc: self.disc, datasets, rounds: self.rounds, iters: self.iters })
    }
}

/// Algorithm-1 training from freshly initialized heads.
pub fn train(
    env: Env,
    config: &TrainerConfig,
    origin: Option<Vec<Tensor>>,
    metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let hc = crate::policy::HeadConfig::for_generator(env.gen.config(), env.cost.sparse.num_levels());
    let heads = PolicyHeads::new(hc, mix_seed(config.seed, 5));
    PolicyTrainer::new(env, config.clone(), heads, origin)?.run(metrics)
}
