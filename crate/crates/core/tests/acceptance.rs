//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary so the
//! lines always reach the terminal; exits non-zero when any check fails.
//!
//! `RAPID3_CRITERIA=1,2,10` restricts the run to the listed criteria.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{check_leaves, check_params, random_values, Leaf};
use rapid3_core::accel::{cache_apply, cache_update, equivalent_steps, ResidualCache, SparsityCandidates, StepCost};
use rapid3_core::generator::{cfg_forward, sample_reference, LatentState, PATCH_DIM};
use rapid3_core::harness::{
    bin_counts, pipeline, run_eval, Baseline, EvalReport, EvalSpec, RunConfig, Strategy, MANUAL_PRESETS,
};
use rapid3_core::numerics::{
    beta_logprob, beta_sample, categorical_sample, mix_seed, Bound, BetaParams, BlockSparsity, CategoricalParams, Rng,
    Tape, Tensor, Var, LOG_PROB_FLOOR,
};
use rapid3_core::policy::{
    next_timestep, rollout, trajectory_logprob, trajectory_logprob_graph, ActionRecord, Choice, DegenerateController,
    HeadConfig, HeadKind, PolicyHeads, Trajectory,
};
use rapid3_core::accel::CostLedger;
use rapid3_core::reward::composite_reward;
use rapid3_core::trainer::{grpo_advantages, grpo_objective_graph, rloo_advantages, TrainOutcome, TrainerConfig};
use rapid3_core::Result;

const SEEDS: u64 = 10;
const GRAD_TOL: f64 = 1e-4;
/// Desk-scale policy learning rate; Table 8's 1e-5 leaves the toy heads
/// where they started within a few hundred updates.
const DESK_LR: f64 = 3e-3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---- criterion 1 -------------------------------------------------------

fn k_oracle(steps: &[(f64, f64)]) -> (f64, usize) {
    let mut k = 0.0f64;
    for &(c, s) in steps {
        k += (1.0 - c) * (1.0 - s);
    }
    let r = if k - k.floor() >= 0.5 { k.floor() + 1.0 } else { k.floor() };
    (k, (r as usize).max(1))
}

fn reward_oracle(q: f64, d: f64, k: usize, lambda: f64, omega: f64) -> f64 {
    (1..=k).map(|i| lambda.powi((k - i) as i32) * (q + omega * d)).sum::<f64>() / k as f64
}

fn grpo_oracle(r: &[f64]) -> Vec<f64> {
    let n = r.len() as f64;
    let m = r.iter().sum::<f64>() / n;
    let s = (r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    if s < 1e-8 {
        return vec![0.0; r.len()];
    }
    r.iter().map(|x| (x - m) / s).collect()
}

fn rloo_oracle(r: &[f64]) -> Vec<f64> {
    (0..r.len())
        .map(|i| {
            let rest: f64 = r.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x).sum();
            r[i] - rest / (r.len() - 1) as f64
        })
        .collect()
}

fn criterion_1() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = Rng::new(1001);
    let mut worst = [0.0f64; 4];
    let mut rounding_ok = true;
    for _ in 0..1000 {
        let n = 1 + rng.below(28);
        let steps: Vec<(f64, f64)> = (0..n)
            .map(|_| if rng.uniform() < 0.3 { (rng.uniform() * 0.99, 0.0) } else { (0.0, rng.uniform() * 0.99) })
            .collect();
        let recs: Vec<StepCost> = steps
            .iter()
            .enumerate()
            .map(|(i, &(c, s))| StepCost { t: n - i, computed: c == 0.0, c_cache: c, c_sparse: s })
            .collect();
        let (k, r) = equivalent_steps(&recs)?;
        let (ko, ro) = k_oracle(&steps);
        worst[0] = worst[0].max((k - ko).abs());
        rounding_ok &= r == ro;

        let (q, d) = (rng.uniform() * 4.0 - 2.0, rng.uniform());
        let (kk, lambda, omega) = (1 + rng.below(28), 0.01 + 0.98 * rng.uniform(), rng.uniform() * 3.0);
        let rr = composite_reward(q, d, kk, lambda, omega)?.r;
        worst[1] = worst[1].max((rr - reward_oracle(q, d, kk, lambda, omega)).abs());

        let g = 2 + rng.below(15);
        let rewards: Vec<f64> = (0..g).map(|_| rng.uniform() * 6.0 - 3.0).collect();
        for (a, b) in grpo_advantages(&rewards)?.iter().zip(grpo_oracle(&rewards)) {
            worst[2] = worst[2].max((a - b).abs());
        }
        for (a, b) in rloo_advantages(&rewards)?.iter().zip(rloo_oracle(&rewards)) {
            worst[3] = worst[3].max((a - b).abs());
        }
    }
    let mut l = CostLedger::new();
    l.push_compute(28, 0.0);
    l.push_reuse(27, 0.95);
    l.push_compute(26, 0.10);
    let (k, kr) = l.equivalent_steps()?;
    let worked_k = (k - 1.95).abs() < 1e-12 && kr == 2;
    let r = composite_reward(1.0, 0.5, 10, 0.97, 1.0)?.r;
    let worked_r = (r - 1.31288).abs() < 1e-5;
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&w| w < 1e-9) && rounding_ok && worked_k && worked_r && secs < 5.0;
    Ok(verdict(
        pass,
        format!(
            "max err K {:.1e} r {:.1e} grpo {:.1e} rloo {:.1e}; K=1.95->{kr}; r={r:.5}; {secs:.2}s (<5s)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ))
}

// ---- criterion 2 -------------------------------------------------------

fn away_from(mut leaf: Leaf, kinks: &[f64], gap: f64) -> Leaf {
    for v in &mut leaf.values {
        for &k in kinks {
            if (*v - k).abs() < gap {
                *v = k + gap.copysign(*v - k);
            }
        }
    }
    leaf
}

type Make = Box<dyn Fn(&mut Rng) -> Vec<Leaf>>;
type Graph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn primitives() -> Vec<(&'static str, Make, Graph)> {
    fn one(shape: &'static [usize], std: f64) -> Make {
        Box::new(move |r| vec![Leaf::randn(shape, std, r)])
    }
    fn two(a: &'static [usize], b: &'static [usize]) -> Make {
        Box::new(move |r| vec![Leaf::randn(a, 1.0, r), Leaf::randn(b, 1.0, r)])
    }
    let sp = BlockSparsity { zeta1: 0.3, zeta2: 0.2, block: 4 };
    vec![
        ("add", two(&[3, 4], &[3, 4]), Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", two(&[3, 4], &[3, 4]), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", two(&[3, 4], &[3, 4]), Box::new(|t, v| t.mul(v[0], v[1]))),
        (
            "minimum",
            Box::new(|r| {
                let a = Leaf::randn(&[3, 4], 1.0, r);
                let mut b = Leaf::randn(&[3, 4], 1.0, r);
                for (x, y) in a.values.iter().zip(b.values.iter_mut()) {
                    if (x - *y).abs() < 0.05 {
                        *y = x + 0.05;
                    }
                }
                vec![a, b]
            }),
            Box::new(|t, v| t.minimum(v[0], v[1])),
        ),
        ("add_row", two(&[3, 4], &[4]), Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("scale", one(&[6], 1.0), Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", one(&[6], 1.0), Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("silu", one(&[4, 5], 1.5), Box::new(|t, v| Ok(t.silu(v[0])))),
        ("gelu", one(&[4, 5], 1.5), Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("softplus", one(&[4, 5], 1.5), Box::new(|t, v| Ok(t.softplus(v[0])))),
        ("exp", one(&[4, 5], 1.5), Box::new(|t, v| Ok(t.exp(v[0])))),
        (
            "clamp",
            Box::new(|r| vec![away_from(Leaf::randn(&[4, 5], 1.0, r), &[-0.5, 0.5], 0.05)]),
            Box::new(|t, v| Ok(t.clamp(v[0], -0.5, 0.5))),
        ),
        ("softmax", one(&[4, 5], 1.5), Box::new(|t, v| Ok(t.softmax(v[0])))),
        ("log_softmax", one(&[4, 5], 1.5), Box::new(|t, v| Ok(t.log_softmax(v[0])))),
        ("layer_norm", one(&[4, 5], 1.5), Box::new(|t, v| Ok(t.layer_norm(v[0])))),
        ("matmul", two(&[3, 4], &[4, 2]), Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", one(&[3, 4], 1.0), Box::new(|t, v| t.transpose(v[0]))),
        ("batched_transpose", one(&[2, 3, 4], 1.0), Box::new(|t, v| t.batched_transpose(v[0], 2, 3, 4))),
        (
            "reshape",
            one(&[3, 4], 1.0),
            Box::new(|t, v| {
                let x = t.reshape(v[0], &[2, 6])?;
                Ok(t.softmax(x))
            }),
        ),
        ("mean_last", one(&[3, 4], 1.0), Box::new(|t, v| Ok(t.mean_last(v[0])))),
        ("mean_rows", one(&[6, 4], 1.0), Box::new(|t, v| t.mean_rows(v[0], 3))),
        ("sum", one(&[5], 1.0), Box::new(|t, v| Ok(t.sum(v[0])))),
        ("weighted_sum", one(&[5], 1.0), Box::new(|t, v| t.weighted_sum(v[0], &[0.5, -1.0, 2.0, 0.0, 3.0]))),
        ("column", one(&[3, 4], 1.0), Box::new(|t, v| t.column(v[0], 2))),
        ("concat", two(&[3], &[2, 2]), Box::new(|t, v| t.concat(&[v[0], v[1]]))),
        ("embedding", one(&[5, 3], 1.0), Box::new(|t, v| t.embedding(v[0], &[4, 0, 4, 2]))),
        (
            "modulate",
            Box::new(|r| vec![Leaf::randn(&[6, 4], 1.0, r), Leaf::randn(&[2, 4], 1.0, r), Leaf::randn(&[2, 4], 1.0, r)]),
            Box::new(|t, v| t.modulate(v[0], v[1], v[2], 3)),
        ),
        ("group_mul", two(&[6, 4], &[3, 4]), Box::new(|t, v| t.group_mul(v[0], v[1], 2))),
        (
            "conv2d",
            Box::new(|r| vec![Leaf::randn(&[2, 3, 5, 5], 1.0, r), Leaf::randn(&[4, 3, 3, 3], 0.3, r), Leaf::randn(&[4], 0.1, r)]),
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, 1)),
        ),
        (
            "conv2d strided",
            Box::new(|r| vec![Leaf::randn(&[2, 3, 5, 5], 1.0, r), Leaf::randn(&[4, 3, 3, 3], 0.3, r), Leaf::randn(&[4], 0.1, r)]),
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, 0)),
        ),
        (
            "pick",
            one(&[3, 4], 1.0),
            Box::new(|t, v| {
                let lp = t.log_softmax(v[0]);
                t.pick(lp, &[1, 3, 0], LOG_PROB_FLOOR)
            }),
        ),
        (
            "beta_logprob",
            Box::new(|r| vec![Leaf::uniform(&[4], 0.5, 5.0, r), Leaf::uniform(&[4], 0.5, 5.0, r)]),
            Box::new(|t, v| t.beta_logprob(v[0], v[1], &[0.1, 0.4, 0.75, 0.98])),
        ),
        ("bce_with_logits", one(&[5], 2.0), Box::new(|t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.3, 0.0]))),
        ("cross_entropy", one(&[3, 5], 1.0), Box::new(|t, v| t.cross_entropy(v[0], &[4, 0, 2]))),
        ("mse", two(&[3, 4], &[3, 4]), Box::new(|t, v| t.mse(v[0], v[1]))),
        ("attention", one(&[16, 24], 0.8), Box::new(|t, v| t.attention(v[0], 2, 8, 2, None))),
        ("attention sparse", one(&[16, 24], 1.5), Box::new(move |t, v| t.attention(v[0], 2, 8, 2, Some(&sp)))),
    ]
}

fn toy_heads(seed: u64) -> PolicyHeads {
    PolicyHeads::new(HeadConfig::for_generator(&Default::default(), 3), seed)
}

fn head_inputs(seed: u64) -> (Tensor, Tensor) {
    (common::randn(&[16, PATCH_DIM], 1.0, seed), common::randn(&[64], 1.0, seed + 1))
}

fn record(choice: Choice, seed: u64) -> ActionRecord {
    let (x, c) = head_inputs(seed);
    ActionRecord { choice, logprob: 0.0, active: true, input: Some(x), cond: Some(c) }
}

/// Forced first step at 28, then one policy-driven step at 27.
fn toy_trajectory(seed: u64) -> Trajectory {
    let a = 0.3 + 0.4 * Rng::new(seed).uniform();
    let records = vec![
        record(Choice::Cache(seed as usize % 2), 10 * seed),
        record(Choice::Sparse(seed as usize % 4), 10 * seed + 2),
        record(Choice::Step { a, alpha: 0.0, beta: 0.0, t: 27, t_next: next_timestep(27, a) }, 10 * seed + 4),
    ];
    let mut ledger = CostLedger::new();
    ledger.push_compute(28, 0.0);
    ledger.push_compute(27, 0.0);
    Trajectory {
        prompt: 0,
        noise_seed: seed,
        records,
        ledger,
        timesteps: vec![28, 27, 0],
        latent: Tensor::zeros(&[16, PATCH_DIM]),
        image: Tensor::zeros(&[8, 8, 1]),
        logprob_old: 0.0,
    }
}

fn with_values(h: &PolicyHeads, vals: &[Vec<f64>]) -> PolicyHeads {
    let mut h = h.clone();
    let entries: Vec<(String, Tensor)> = h
        .params()
        .names()
        .iter()
        .zip(h.params().tensors())
        .zip(vals)
        .map(|((n, t), v)| (n.clone(), Tensor::new(t.shape(), v.iter().map(|&x| x as f32).collect()).unwrap()))
        .collect();
    h.params_mut().load(&entries).unwrap();
    h
}

fn criterion_2() -> Result<Verdict> {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut note = |e: f64, name: &'static str| {
        if e > worst.0 {
            worst = (e, name);
        }
    };
    let prims = primitives();
    for (name, make, f) in &prims {
        for seed in 0..SEEDS {
            let leaves = make(&mut Rng::new(mix_seed(seed, 77)));
            note(check_leaves(&leaves, seed, |t, v| f(t, v))?, name);
        }
    }
    let heads_checked = [
        ("step head", Choice::Step { a: 0.37, alpha: 0.0, beta: 0.0, t: 10, t_next: next_timestep(10, 0.37) }),
        ("cache head", Choice::Cache(1)),
        ("sparse head", Choice::Sparse(3)),
    ];
    for (name, choice) in &heads_checked {
        for seed in 0..SEEDS {
            let h = toy_heads(seed);
            let vals = random_values(h.params(), 0.3, &mut Rng::new(seed));
            let (x, c) = head_inputs(50 + seed);
            note(check_params(h.params(), &vals, 4, seed, |t, p| h.logprob_graph(t, p, choice, &x, &c))?, name);
        }
    }
    // one ratio per branch of the clipped objective, away from the kinks
    let cases = [(0.10f64.ln_1p(), 1.0), (0.5f64.ln_1p(), 1.0), (0.6f64.ln(), 1.0), (0.6f64.ln(), -1.0)];
    for seed in 0..SEEDS {
        let h = toy_heads(seed);
        let vals = random_values(h.params(), 0.3, &mut Rng::new(seed));
        let hv = with_values(&h, &vals);
        let mut trajs: Vec<Trajectory> = (0..4).map(|i| toy_trajectory(4 * seed + i)).collect();
        for (t, &(log_phi, _)) in trajs.iter_mut().zip(&cases) {
            t.logprob_old = trajectory_logprob(t, &hv)? - log_phi;
        }
        let adv: Vec<f64> = cases.iter().map(|c| c.1).collect();
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let e = check_params(h.params(), &vals, 3, seed, |t, p| Ok(grpo_objective_graph(t, p, &h, &refs, &adv, 0.2)?.0))?;
        note(e, "surrogate");
    }
    let secs = start.elapsed().as_secs_f64();
    let n = prims.len() + heads_checked.len() + 1;
    Ok(verdict(
        worst.0 < GRAD_TOL && secs < 60.0,
        format!("{n} graphs x {SEEDS} seeds, max rel err {:.2e} ({}); {secs:.1}s (<60s)", worst.0, worst.1),
    ))
}

// ---- criterion 3 -------------------------------------------------------

fn criterion_3() -> Result<Verdict> {
    let fx = common::fixture::reference();
    let start = Instant::now();
    let mut bitwise = true;
    for (prompt, seed) in [(0usize, 1u64), (3, 9), (5, 77), (7, 1234)] {
        let tr = rollout(&fx.gen, prompt, seed, 0.0, &fx.cost, &mut DegenerateController)?;
        let reference = sample_reference(&fx.gen, prompt, seed, 0.0)?;
        bitwise &= tr.latent.bit_eq(&reference.x) && tr.image.bit_eq(&reference.image());
        bitwise &= tr.ledger.equivalent_steps()? == (28.0, 28);
    }

    let keep_all = SparsityCandidates { levels: vec![(0.0, 0.0)], nominal_costs: vec![0.0], block: 4 };
    let mut sparse_err = 0.0f32;
    for seed in 0..10 {
        let x = common::randn(&[16, 3 * 64], 1.5, seed);
        let (dense, _) = rapid3_core::accel::sparse_attention(&x, 4, 0, &keep_all)?;
        let (sparse, _) = rapid3_core::accel::sparse_attention(&x, 4, 1, &keep_all)?;
        sparse_err = sparse_err.max(sparse.max_abs_diff(&dense));
    }

    let mut cache_err = 0.0f32;
    for (prompt, seed) in [(2usize, 31u64), (6, 8)] {
        let mut state = LatentState::initial(&fx.gen, prompt, seed, 0.0)?;
        state.t = 17;
        let mut cache = ResidualCache::new();
        cache_update(&fx.gen, &state, None, &mut cache)?;
        let reused = cache_apply(&state, &cache)?;
        let fresh = cfg_forward(&fx.gen, &state, None)?;
        cache_err = cache_err.max(reused.max_abs_diff(&fresh.guided));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        bitwise && sparse_err <= 1e-6 && cache_err <= 1e-6 && secs < 30.0,
        format!(
            "degenerate rollout bitwise={bitwise}; keep-all sparse err {sparse_err:.1e}; cache reuse err {cache_err:.1e}; {secs:.1}s (<30s)"
        ),
    ))
}

// ---- criterion 4 -------------------------------------------------------

fn beta_moments(p: &BetaParams, n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = Rng::new(seed);
    let xs: Vec<f64> = (0..n).map(|_| beta_sample(p, &mut rng)).collect::<Result<_>>()?;
    let m = xs.iter().sum::<f64>() / n as f64;
    Ok((m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64))
}

/// Riemann sum on x = sin^2(pi u / 2), graded toward both ends.
fn density_mass(p: &BetaParams, points: usize) -> Result<f64> {
    let x = |u: f64| (std::f64::consts::FRAC_PI_2 * u).sin().powi(2);
    let mut s = 0.0;
    for i in 0..points {
        let (lo, hi) = (x(i as f64 / points as f64), x((i + 1) as f64 / points as f64));
        s += beta_logprob(p, x((i as f64 + 0.5) / points as f64))?.exp() * (hi - lo);
    }
    Ok(s)
}

fn criterion_4() -> Result<Verdict> {
    let n = 100_000;
    let mut ok = true;
    let mut notes = Vec::new();
    let (m, v) = beta_moments(&BetaParams::new(1.0, 1.0)?, n, 11)?;
    ok &= (m - 0.5).abs() < 0.01 && (v - 1.0 / 12.0).abs() < 2e-3;
    notes.push(format!("B(1,1) mean {m:.4} var {v:.5}"));
    let (m, v) = beta_moments(&BetaParams::new(5.0, 5.0)?, n, 12)?;
    ok &= (m - 0.5).abs() < 0.01 && (v - 1.0 / 44.0).abs() < 1e-3;
    notes.push(format!("B(5,5) mean {m:.4} var {v:.5}"));

    let probs = vec![0.1, 0.45, 0.05, 0.4];
    let cat = CategoricalParams::new(probs.clone())?;
    let mut rng = Rng::new(5);
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[categorical_sample(&cat, &mut rng)] += 1;
    }
    let cat_err = counts.iter().zip(&probs).map(|(&c, p)| (c as f64 / n as f64 - p).abs()).fold(0.0, f64::max);
    ok &= cat_err < 0.01;
    notes.push(format!("categorical max freq err {cat_err:.4}"));

    let mut mass_err = 0.0f64;
    for a in [0.5, 1.0, 2.0, 5.0] {
        for b in [0.5, 1.0, 2.0, 5.0] {
            mass_err = mass_err.max((density_mass(&BetaParams::new(a, b)?, 10_000)? - 1.0).abs());
        }
    }
    ok &= mass_err < 1e-3;
    notes.push(format!("density mass err {mass_err:.1e}"));

    let draw = |seed| -> Result<Vec<u64>> {
        let mut rng = Rng::new(seed);
        let b = BetaParams::new(1.7, 0.6)?;
        let c = CategoricalParams::new(vec![0.2, 0.3, 0.5])?;
        let mut out = Vec::new();
        for _ in 0..500 {
            out.push(beta_sample(&b, &mut rng)?.to_bits());
            out.push(categorical_sample(&c, &mut rng) as u64);
            out.push(rng.next_u64());
        }
        Ok(out)
    };
    let same = draw(42)? == draw(42)?;
    ok &= same;
    notes.push(format!("seeded replay identical={same}"));
    Ok(verdict(ok, notes.join("; ")))
}

// ---- criterion 5 -------------------------------------------------------

fn criterion_5() -> Result<Verdict> {
    let mut loss_max = 0.0f64;
    let mut grad_err = 0.0f64;
    let mut ratio_ok = true;
    for seed in 0..SEEDS {
        let h0 = toy_heads(seed);
        let vals = random_values(h0.params(), 0.3, &mut Rng::new(seed));
        let h = with_values(&h0, &vals);
        let vals: Vec<Vec<f64>> =
            h.params().tensors().iter().map(|t| t.data().iter().map(|&x| x as f64).collect()).collect();
        let trajs: Vec<Trajectory> = (0..4).map(|i| toy_trajectory(4 * seed + i)).collect();
        let rewards: Vec<f64> = (0..4).map(|i| (i as f64 * 0.37 + seed as f64).sin()).collect();
        let adv = grpo_advantages(&rewards)?;

        let mut f32_trajs = trajs.clone();
        for t in &mut f32_trajs {
            t.logprob_old = trajectory_logprob(t, &h)?;
        }
        let mut tape = Tape::<f32>::new();
        let p = h.params().bind(&mut tape, false);
        let refs: Vec<&Trajectory> = f32_trajs.iter().collect();
        let (loss, stats) = grpo_objective_graph(&mut tape, &p, &h, &refs, &adv, 0.2)?;
        loss_max = loss_max.max(tape.scalar(loss).abs() as f64);
        ratio_ok &= stats.mean_ratio == 1.0 && stats.clip_frac == 0.0;

        let bind = |tape: &mut Tape<f64>, grad: bool| -> Result<(Vec<Var>, Bound)> {
            let vars: Vec<Var> = h
                .params()
                .tensors()
                .iter()
                .zip(&vals)
                .map(|(t, v)| tape.leaf_values(t.shape(), v.clone(), grad))
                .collect::<Result<_>>()?;
            let b = Bound::from_vars(h.params(), vars.clone())?;
            Ok((vars, b))
        };
        let grads = |surrogate: bool| -> Result<Vec<f64>> {
            let mut tape = Tape::<f64>::new();
            let (vars, p) = bind(&mut tape, true)?;
            let loss = if surrogate {
                let mut synced = trajs.clone();
                for t in &mut synced {
                    let mut tp = Tape::<f64>::new();
                    let (_, bp) = bind(&mut tp, false)?;
                    let lp = trajectory_logprob_graph(&mut tp, &bp, &h, &t.records)?.expect("active records");
                    t.logprob_old = tp.scalar(lp);
                }
                let refs: Vec<&Trajectory> = synced.iter().collect();
                grpo_objective_graph(&mut tape, &p, &h, &refs, &adv, 0.2)?.0
            } else {
                let lps: Vec<Var> = trajs
                    .iter()
                    .map(|t| Ok(trajectory_logprob_graph(&mut tape, &p, &h, &t.records)?.expect("active records")))
                    .collect::<Result<_>>()?;
                let all = tape.concat(&lps)?;
                let w: Vec<f64> = adv.iter().map(|a| -a / adv.len() as f64).collect();
                tape.weighted_sum(all, &w)?
            };
            let g = tape.backward(loss)?;
            Ok(vars.iter().flat_map(|&v| g.get(v).map(|s| s.to_vec()).unwrap_or_default()).collect())
        };
        let (a, b) = (grads(true)?, grads(false)?);
        grad_err = grad_err.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }

    let mut rng = Rng::new(55);
    let mut norm_err = 0.0f64;
    for _ in 0..1000 {
        let g = 2 + rng.below(31);
        let r: Vec<f64> = (0..g).map(|_| rng.uniform() * 10.0 - 5.0).collect();
        let a = grpo_advantages(&r)?;
        let m = a.iter().sum::<f64>() / g as f64;
        let s = (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / g as f64).sqrt();
        norm_err = norm_err.max(m.abs()).max((s - 1.0).abs());
    }

    // dyadic rewards and integer shifts: every sum is exact, so equality is bitwise
    let mut shift_exact = true;
    for _ in 0..200 {
        let r: Vec<f64> = (0..4).map(|_| (rng.below(4096) as f64 - 2048.0) / 1024.0).collect();
        let c = rng.below(64) as f64 - 32.0;
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        let (a, b) = (grpo_advantages(&r)?, grpo_advantages(&shifted)?);
        shift_exact &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    Ok(verdict(
        loss_max < 1e-6 && ratio_ok && grad_err < 1e-5 && norm_err < 1e-6 && shift_exact,
        format!(
            "post-sync |loss| {loss_max:.1e}, grad vs policy gradient {grad_err:.1e}; advantage mean/std err {norm_err:.1e}; shift exact={shift_exact}"
        ),
    ))
}

// ---- criteria 6-9: trained runs ------------------------------------------

struct Run {
    report: EvalReport,
    outcome: TrainOutcome,
    secs: f64,
}

struct Trained {
    cfg: RunConfig,
    spec: EvalSpec,
    runs: Vec<(String, Run)>,
}

impl Trained {
    fn new() -> Self {
        let cfg = RunConfig::default();
        Trained { spec: pipeline::eval_spec(&cfg), cfg, runs: Vec::new() }
    }

    /// Table 8 defaults on the reference setup, with the desk-scale learning rate.
    fn base(&self, seed: u64) -> TrainerConfig {
        let tc = RunConfig { seed, ..self.cfg.clone() }.trainer_config();
        TrainerConfig { lr: DESK_LR, ..tc }
    }

    fn run(&mut self, label: &str, tc: TrainerConfig) -> Result<&Run> {
        if let Some(i) = self.runs.iter().position(|(l, _)| l == label) {
            return Ok(&self.runs[i].1);
        }
        let fx = common::fixture::reference();
        let start = Instant::now();
        let (outcome, report) = pipeline::train_and_eval(fx.env(), &tc, self.spec, None)?;
        let secs = start.elapsed().as_secs_f64();
        eprintln!(
            "  [{label}] mean K {:.3}, mean q {:.4}, retention {:.3}, {secs:.0}s",
            report.mean_k(),
            report.mean_q(),
            report.q_retention().unwrap_or(f64::NAN)
        );
        self.runs.push((label.to_string(), Run { report, outcome, secs }));
        Ok(&self.runs.last().unwrap().1)
    }

    fn main_run(&mut self) -> Result<&Run> {
        let tc = self.base(self.cfg.seed);
        self.run("seed0 full", tc)
    }
}

fn criterion_6(t: &mut Trained) -> Result<Verdict> {
    let r = t.main_run()?;
    let (k, q, ret) = (r.report.mean_k(), r.report.mean_q(), r.report.q_retention().unwrap());
    let q_ref = r.report.reference.as_ref().unwrap().mean_q;
    Ok(verdict(
        k <= 14.0 && ret >= 0.90 && r.secs <= 1800.0,
        format!(
            "mean K {k:.3} (<=14, speedup {:.2}x); mean q {q:.4} vs reference {q_ref:.4}, retention {ret:.3} (>=0.90); {} prompts; {:.0}s (<=1800s)",
            r.report.speedup().unwrap(),
            r.report.rows.len(),
            r.secs
        ),
    ))
}

fn step_only(tc: TrainerConfig) -> TrainerConfig {
    TrainerConfig { enabled: [HeadKind::Step].into_iter().collect(), ..tc }
}

fn criterion_7(t: &mut Trained) -> Result<Verdict> {
    let mut ok = true;
    let mut notes = Vec::new();
    for s in 0..3u64 {
        let seed = t.cfg.seed + s;
        let full = t.base(seed);
        let label = if s == 0 { "seed0 full".to_string() } else { format!("seed{s} full") };
        let (kf, qf) = {
            let r = t.run(&label, full.clone())?;
            (r.report.mean_k(), r.report.mean_q())
        };
        let (ks, qs) = {
            let r = t.run(&format!("seed{s} step"), step_only(full))?;
            (r.report.mean_k(), r.report.mean_q())
        };
        let matched = (kf - ks).abs() <= 1.0;
        let noninferior = qf >= qs - 0.02;
        ok &= matched && noninferior;
        notes.push(format!("seed {s}: K {kf:.2} vs {ks:.2}, q {qf:.4} vs {qs:.4}"));
    }
    Ok(verdict(ok, format!("all-heads vs step-only, |dK|<=1 and q >= q_step - 0.02; {}", notes.join("; "))))
}

fn criterion_8(t: &mut Trained) -> Result<Verdict> {
    let (k1, q1) = {
        let r = t.main_run()?;
        (r.report.mean_k(), r.report.mean_q())
    };
    let tc = TrainerConfig { omega: 0.0, ..t.base(t.cfg.seed) };
    let r0 = t.run("seed0 omega0", tc)?;
    let (k0, q0) = (r0.report.mean_k(), r0.report.mean_q());
    let matched = (k1 - k0).abs() <= 1.0;
    Ok(verdict(
        matched && q1 >= q0 - 0.02 && q0 >= q1,
        format!("omega=1: K {k1:.2} q {q1:.4}; omega=0: K {k0:.2} q {q0:.4}; need |dK|<=1, q1 >= q0 - 0.02, q0 >= q1"),
    ))
}

fn criterion_9(t: &mut Trained) -> Result<Verdict> {
    let k97 = t.main_run()?.report.mean_k();
    let tc = TrainerConfig { lambda: 0.90, ..t.base(t.cfg.seed) };
    let k90 = t.run("seed0 lambda0.90", tc)?.report.mean_k();
    Ok(verdict(k90 <= k97 + 0.5, format!("lambda 0.90: K {k90:.3}; lambda 0.97: K {k97:.3} (+0.5 = {:.3})", k97 + 0.5)))
}

/// Run properties of the reference training run beyond the numbered list.
fn run_properties(t: &mut Trained) -> Result<Vec<(String, Verdict)>> {
    let r = t.main_run()?;
    let iters = &r.outcome.iters;
    let n = iters.len().min(50);
    let first = iters[..n].iter().map(|m| m.mean_k).sum::<f64>() / n as f64;
    let last = iters[iters.len() - n..].iter().map(|m| m.mean_k).sum::<f64>() / n as f64;
    let hist = bin_counts(&r.report.step_counts()[0]);
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    Ok(vec![
        (
            "training lowers cost".into(),
            verdict(last < first, format!("mean K over last 50 iterations {last:.3} vs first 50 {first:.3}")),
        ),
        (
            "step histogram spread".into(),
            verdict(occupied >= 2, format!("total-steps histogram {hist:?}, {occupied} occupied bins (>=2)")),
        ),
    ])
}

// ---- criterion 10 ------------------------------------------------------

fn criterion_10() -> Result<Verdict> {
    let fx = common::fixture::reference();
    let spec = pipeline::eval_spec(&fx.cfg);
    let (reference, _) = run_eval(fx.env(), None, Strategy::Reference, spec, 0.0)?;

    let (mut nine, _) = run_eval(fx.env(), None, Strategy::Baseline(Baseline::FixedSteps(9)), spec, 0.0)?;
    nine.attach_reference(&reference)?;
    let speedup = nine.speedup().unwrap();
    let nine_ok = (speedup - 28.0 / 9.0).abs() < 1e-9 && nine.rows.iter().all(|r| r.k == 9.0);

    let (zero, _) = run_eval(fx.env(), None, Strategy::Baseline(Baseline::ThresholdCache(0.0)), spec, 0.0)?;
    let reuse: usize = zero.rows.iter().map(|r| r.reuse_steps).sum();
    let zero_ok = reuse == 0 && zero.rows.iter().all(|r| r.k == r.k_step as f64);

    let mut manual = Vec::new();
    let mut manual_ok = true;
    for (name, b) in MANUAL_PRESETS {
        let (mut rep, _) = run_eval(fx.env(), None, Strategy::Baseline(b), spec, 0.0)?;
        rep.attach_reference(&reference)?;
        let mut buf = Vec::new();
        rep.write_csv(&mut buf)?;
        let back = EvalReport::read_csv(&buf[..], &rep.label)?;
        manual_ok &= rep.rows.len() == spec.prompts
            && back.rows.len() == spec.prompts
            && rep.rows.iter().all(|r| r.k > 0.0 && r.k <= r.k_step as f64 && r.q.is_finite())
            && rep.speedup().is_some_and(|s| s.is_finite());
        manual.push(format!("{name} K {:.2} ret {:.3}", rep.mean_k(), rep.q_retention().unwrap()));
    }
    Ok(verdict(
        nine_ok && zero_ok && manual_ok,
        format!(
            "fixed-steps(9) speedup {speedup:.12} (28/9 = {:.12}); threshold-cache(0) reuse steps {reuse}; {}",
            28.0 / 9.0,
            manual.join(", ")
        ),
    ))
}

// ---- driver ------------------------------------------------------------

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("RAPID3_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|s| s.contains(&n));
    let mut trained = Trained::new();
    let mut failed = 0;
    let total = Instant::now();

    let mut report = |label: String, out: std::thread::Result<Result<Verdict>>, elapsed: Duration| {
        let (pass, detail) = match out {
            Ok(Ok(v)) => (v.pass, v.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => (false, format!("panic: {}", p.downcast_ref::<String>().cloned().unwrap_or_default())),
        };
        if !pass {
            failed += 1;
        }
        println!("{label}: {} ({:.1}s) {detail}", if pass { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    };

    type Check<'a> = Box<dyn FnOnce(&mut Trained) -> Result<Verdict> + 'a>;
    let checks: Vec<(usize, &str, Check)> = vec![
        (1, "formula oracles", Box::new(|_| criterion_1())),
        (2, "gradient suite", Box::new(|_| criterion_2())),
        (3, "exactness identities", Box::new(|_| criterion_3())),
        (4, "distribution suite", Box::new(|_| criterion_4())),
        (5, "GRPO sanity", Box::new(|_| criterion_5())),
        (6, "end-to-end speedup and quality", Box::new(criterion_6)),
        (7, "ablation non-inferiority", Box::new(criterion_7)),
        (8, "adversarial reward effect", Box::new(criterion_8)),
        (9, "lambda sweep", Box::new(criterion_9)),
        (10, "baseline harness", Box::new(|_| criterion_10())),
    ];
    for (n, name, check) in checks {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(|| check(&mut trained)));
        report(format!("criterion {n} ({name})"), out, start.elapsed());
    }
    if wanted(6) {
        let start = Instant::now();
        match catch_unwind(AssertUnwindSafe(|| run_properties(&mut trained))) {
            Ok(Ok(props)) => {
                for (name, v) in props {
                    report(format!("run property ({name})"), Ok(Ok(v)), start.elapsed());
                }
            }
            other => report("run properties".into(), other.map(|r| r.map(|_| verdict(false, ""))), start.elapsed()),
        }
    }
    println!("acceptance: {failed} failing, {:.0}s total", total.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
